//! Bilevel problem interface and synthetic families.
//!
//! Each node `i` owns an upper loss `f_i(x, y)` and a lower loss `g_i(x, y)`
//! that is strongly convex in `y`. The network objective is
//! `Phi(x) = f(x, y*(x))` with `f = mean f_i`, `g = mean g_i` and
//! `y*(x) = argmin_y g(x, y)`.
//!
//! Derivative oracles are matrix-free: second-order information is only
//! available as Hessian- and Jacobian-vector products. Stochastic oracles are
//! driven by explicit samples drawn from a caller-owned random stream, so the
//! same sample can be reused across several evaluations.

mod logcosh;
mod quadratic;
mod ridge;

pub use logcosh::{make_logcosh, LogCoshProblem};
pub use quadratic::{make_quadratic, LowerNoise, QuadraticNode, QuadraticProblem, QuadraticSpec, UpperNoise};
pub use ridge::{make_ridge_tuning, RidgeSample, RidgeTuningProblem, RidgeTuningSpec};

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::conjugate_gradient;

/// Residual target for the lower-level and auxiliary linear solves.
pub const SOLVE_TOLERANCE: f64 = 1e-10;

/// Regularity constants; `None` when not known for the instance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    /// Strong-convexity modulus of every `g_i(x, .)`.
    pub mu_g: f64,
    pub l_f: Option<f64>,
    pub l_grad_f: Option<f64>,
    pub l_grad_g: Option<f64>,
    pub l_hess_g: Option<f64>,
    pub sigma: Option<f64>,
    pub b1: Option<f64>,
    pub b2: Option<f64>,
}

/// Per-node oracle bundle of a decentralized bilevel problem.
pub trait BilevelProblem: Send + Sync {
    /// Sample `xi` driving the upper-level stochastic oracles.
    type UpperSample: Send;
    /// Sample `zeta` driving the lower-level stochastic oracles.
    type LowerSample: Send;

    fn n_nodes(&self) -> usize;
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;
    fn constants(&self) -> ProblemConstants;

    fn upper_value(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> f64;
    fn lower_value(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> f64;
    fn grad_upper_x(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;
    fn grad_upper_y(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;
    fn grad_lower_x(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;
    fn grad_lower_y(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;
    /// `d^2_{yy} g_i(x, y) v`, length `dim_y`.
    fn hvp_lower_yy(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;
    /// `d^2_{xy} g_i(x, y) v`, length `dim_x`.
    fn jvp_lower_xy(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;

    fn sample_upper<R: Rng + ?Sized>(&self, node: usize, rng: &mut R) -> Self::UpperSample;
    fn sample_lower<R: Rng + ?Sized>(&self, node: usize, rng: &mut R) -> Self::LowerSample;

    fn stoch_grad_upper_x(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>, s: &Self::UpperSample) -> DVector<f64>;
    fn stoch_grad_upper_y(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>, s: &Self::UpperSample) -> DVector<f64>;
    fn stoch_grad_lower_x(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>, s: &Self::LowerSample) -> DVector<f64>;
    fn stoch_grad_lower_y(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>, s: &Self::LowerSample) -> DVector<f64>;
    fn stoch_hvp_lower_yy(
        &self,
        node: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
        v: &DVector<f64>,
        s: &Self::LowerSample,
    ) -> DVector<f64>;
    fn stoch_jvp_lower_xy(
        &self,
        node: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
        v: &DVector<f64>,
        s: &Self::LowerSample,
    ) -> DVector<f64>;

    /// Closed-form `y*(x)` when the family has one.
    fn analytic_y_star(&self, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }

    /// `min_x Phi(x)` when known.
    fn phi_star(&self) -> Option<f64> {
        None
    }

    fn mean_upper_value(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        node_mean_scalar(self.n_nodes(), |i| self.upper_value(i, x, y))
    }
    fn mean_lower_value(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        node_mean_scalar(self.n_nodes(), |i| self.lower_value(i, x, y))
    }
    fn mean_grad_upper_x(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        node_mean(self.n_nodes(), |i| self.grad_upper_x(i, x, y))
    }
    fn mean_grad_upper_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        node_mean(self.n_nodes(), |i| self.grad_upper_y(i, x, y))
    }
    fn mean_grad_lower_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        node_mean(self.n_nodes(), |i| self.grad_lower_y(i, x, y))
    }
    fn mean_hvp_lower_yy(&self, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        node_mean(self.n_nodes(), |i| self.hvp_lower_yy(i, x, y, v))
    }
    fn mean_jvp_lower_xy(&self, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        node_mean(self.n_nodes(), |i| self.jvp_lower_xy(i, x, y, v))
    }
}

fn node_mean(n: usize, f: impl Fn(usize) -> DVector<f64>) -> DVector<f64> {
    let mut acc = f(0);
    for i in 1..n {
        acc += f(i);
    }
    acc / n as f64
}

fn node_mean_scalar(n: usize, f: impl Fn(usize) -> f64) -> f64 {
    (0..n).map(f).sum::<f64>() / n as f64
}

fn check_len(expected: usize, v: &DVector<f64>) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch { expected, got: v.len() });
    }
    Ok(())
}

/// `y*(x)`: closed form when available, otherwise damped Newton with
/// conjugate-gradient steps on the network lower objective.
pub fn lower_solve<P: BilevelProblem>(problem: &P, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(problem.dim_x(), x)?;
    let start = problem.analytic_y_star(x).unwrap_or_else(|| DVector::zeros(problem.dim_y()));
    newton_polish(problem, x, start)
}

const NEWTON_MAX_ITER: usize = 100;

fn newton_polish<P: BilevelProblem>(problem: &P, x: &DVector<f64>, mut y: DVector<f64>) -> Result<DVector<f64>> {
    let p = problem.dim_y();
    let mut grad = problem.mean_grad_lower_y(x, &y);
    // rounding in the gradient grows with the size of the iterate
    let tol = SOLVE_TOLERANCE * 1f64.max(x.amax()).max(y.amax());
    let mut iterations = 0;
    while grad.norm() > tol {
        if iterations == NEWTON_MAX_ITER || !grad.norm().is_finite() {
            return Err(Error::LowerSolveDiverged { iterations, residual: grad.norm() });
        }
        let cg = conjugate_gradient(
            |v| problem.mean_hvp_lower_yy(x, &y, v),
            &grad,
            tol * 1e-2,
            10 * p + 50,
        );
        let direction = cg.x;
        // Armijo backtracking on g(x, .)
        let value = problem.mean_lower_value(x, &y);
        let slope = grad.dot(&direction);
        let mut step = 1.0;
        let mut candidate = &y - &direction * step;
        while step > 1e-8 && problem.mean_lower_value(x, &candidate) > value - 1e-4 * step * slope {
            step *= 0.5;
            candidate = &y - &direction * step;
        }
        let next_grad = problem.mean_grad_lower_y(x, &candidate);
        // near the optimum the value test is dominated by rounding; accept on gradient progress
        if step <= 1e-8 && next_grad.norm() >= grad.norm() {
            return Err(Error::LowerSolveDiverged { iterations, residual: grad.norm() });
        }
        y = candidate;
        grad = next_grad;
        iterations += 1;
    }
    Ok(y)
}

/// Solves `d^2_{yy} g(x, y) z = d_y f(x, y)` at `y = y_star`.
pub fn solve_auxiliary<P: BilevelProblem>(problem: &P, x: &DVector<f64>, y_star: &DVector<f64>) -> Result<DVector<f64>> {
    let rhs = problem.mean_grad_upper_y(x, y_star);
    let tol = SOLVE_TOLERANCE * 1f64.max(rhs.amax());
    let cg = conjugate_gradient(|v| problem.mean_hvp_lower_yy(x, y_star, v), &rhs, tol * 1e-1, 10 * problem.dim_y() + 50);
    if !cg.converged && cg.residual > tol {
        return Err(Error::SingularHessian);
    }
    Ok(cg.x)
}

/// `z*(x) = [d^2_{yy} g(x, y*)]^{-1} d_y f(x, y*)`.
pub fn z_star<P: BilevelProblem>(problem: &P, x: &DVector<f64>) -> Result<DVector<f64>> {
    let y = lower_solve(problem, x)?;
    solve_auxiliary(problem, x, &y)
}

/// `grad Phi(x) = d_x f(x, y*) - d^2_{xy} g(x, y*) z*(x)`.
pub fn hypergradient_exact<P: BilevelProblem>(problem: &P, x: &DVector<f64>) -> Result<DVector<f64>> {
    let y = lower_solve(problem, x)?;
    let z = solve_auxiliary(problem, x, &y)?;
    Ok(problem.mean_grad_upper_x(x, &y) - problem.mean_jvp_lower_xy(x, &y, &z))
}

/// `Phi(x) = f(x, y*(x))`.
pub fn phi_value<P: BilevelProblem>(problem: &P, x: &DVector<f64>) -> Result<f64> {
    let y = lower_solve(problem, x)?;
    Ok(problem.mean_upper_value(x, &y))
}

/// Sampling estimates of regularity constants over the box `[-radius, radius]`.
///
/// These are diagnostics only; the algorithms never read them.
pub fn estimate_constants<P: BilevelProblem, R: Rng + ?Sized>(
    problem: &P,
    radius: f64,
    samples: usize,
    rng: &mut R,
) -> Result<ProblemConstants> {
    let (d, p) = (problem.dim_x(), problem.dim_y());
    let draw = |len: usize, rng: &mut R| DVector::from_fn(len, |_, _| rng.random_range(-radius..=radius));
    let mut out = problem.constants();
    let (mut l_f, mut l_grad_f, mut l_grad_g, mut l_hess_g, mut sigma2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let stack = |a: DVector<f64>, b: DVector<f64>| DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied());
    for _ in 0..samples {
        let (x, y, x2, y2) = (draw(d, rng), draw(p, rng), draw(d, rng), draw(p, rng));
        let mut v = draw(p, rng);
        v /= v.norm().max(f64::MIN_POSITIVE);
        let gap = stack(&x - &x2, &y - &y2).norm().max(f64::MIN_POSITIVE);
        let ys = lower_solve(problem, &x)?;
        l_f = l_f.max(problem.mean_grad_upper_y(&x, &ys).norm());
        for i in 0..problem.n_nodes() {
            let gf = stack(problem.grad_upper_x(i, &x, &y), problem.grad_upper_y(i, &x, &y));
            let gf2 = stack(problem.grad_upper_x(i, &x2, &y2), problem.grad_upper_y(i, &x2, &y2));
            l_grad_f = l_grad_f.max((gf - gf2).norm() / gap);
            let gg = stack(problem.grad_lower_x(i, &x, &y), problem.grad_lower_y(i, &x, &y));
            let gg2 = stack(problem.grad_lower_x(i, &x2, &y2), problem.grad_lower_y(i, &x2, &y2));
            l_grad_g = l_grad_g.max((gg - gg2).norm() / gap);
            let h = stack(problem.jvp_lower_xy(i, &x, &y, &v), problem.hvp_lower_yy(i, &x, &y, &v));
            let h2 = stack(problem.jvp_lower_xy(i, &x2, &y2, &v), problem.hvp_lower_yy(i, &x2, &y2, &v));
            l_hess_g = l_hess_g.max((h - h2).norm() / gap);
            let sl = problem.sample_lower(i, rng);
            let su = problem.sample_upper(i, rng);
            let e_g = (problem.stoch_grad_lower_y(i, &x, &y, &sl) - problem.grad_lower_y(i, &x, &y)).norm_squared();
            let e_f = (problem.stoch_grad_upper_y(i, &x, &y, &su) - problem.grad_upper_y(i, &x, &y)).norm_squared();
            sigma2 = sigma2.max(e_g).max(e_f);
        }
    }
    out.l_f = out.l_f.or(Some(l_f));
    out.l_grad_f = out.l_grad_f.or(Some(l_grad_f));
    out.l_grad_g = out.l_grad_g.or(Some(l_grad_g));
    out.l_hess_g = out.l_hess_g.or(Some(l_hess_g));
    out.sigma = out.sigma.or(Some(sigma2.sqrt()));
    Ok(out)
}
