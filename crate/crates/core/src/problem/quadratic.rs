use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{BilevelProblem, ProblemConstants};

/// One node of the quadratic family:
/// `f_i = 1/2 y'P y + y'(Q x + q) + 1/2 x'R x`, `g_i = 1/2 y'A y + y'(B x + c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticNode {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub q_vec: DVector<f64>,
    pub r: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
}

/// Generation parameters for [`make_quadratic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSpec {
    pub n_nodes: usize,
    pub dim_x: usize,
    pub dim_y: usize,
    /// Ratio of largest to smallest eigenvalue of the mean lower Hessian.
    pub conditioning: f64,
    /// Scale of node-to-node perturbations around the shared means.
    pub heterogeneity: f64,
    /// Standard deviation of oracle noise; zero gives exact oracles.
    pub noise: f64,
}

/// Additive noise on the upper-level gradients.
#[derive(Debug, Clone)]
pub struct UpperNoise {
    pub gx: DVector<f64>,
    pub gy: DVector<f64>,
}

/// Random perturbation of the lower-level function:
/// `G(x, y; zeta) = g_i + 1/2 y'S y + y'(E x + e)`.
#[derive(Debug, Clone)]
pub struct LowerNoise {
    pub s: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub e_vec: DVector<f64>,
}

/// Quadratic bilevel family with closed-form ground truth.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    nodes: Vec<QuadraticNode>,
    noise: f64,
    mean: QuadraticNode,
    mu_g: f64,
    phi_star: f64,
    homogeneous: bool,
}

impl QuadraticProblem {
    pub fn from_nodes(nodes: Vec<QuadraticNode>, noise: f64) -> Self {
        assert!(!nodes.is_empty(), "at least one node required");
        let k = nodes.len() as f64;
        let sum = |get: &dyn Fn(&QuadraticNode) -> DMatrix<f64>| {
            nodes.iter().skip(1).fold(get(&nodes[0]), |acc, n| acc + get(n)) / k
        };
        let sum_v = |get: &dyn Fn(&QuadraticNode) -> DVector<f64>| {
            nodes.iter().skip(1).fold(get(&nodes[0]), |acc, n| acc + get(n)) / k
        };
        let mean = QuadraticNode {
            p: sum(&|n| n.p.clone()),
            q: sum(&|n| n.q.clone()),
            q_vec: sum_v(&|n| n.q_vec.clone()),
            r: sum(&|n| n.r.clone()),
            a: sum(&|n| n.a.clone()),
            b: sum(&|n| n.b.clone()),
            c: sum_v(&|n| n.c.clone()),
        };
        let mu_g = nodes.iter().map(|n| min_eigenvalue(&n.a)).fold(f64::INFINITY, f64::min);
        let homogeneous = nodes.iter().all(|n| *n == nodes[0]);
        let mut problem = QuadraticProblem { nodes, noise, mean, mu_g, phi_star: f64::NAN, homogeneous };
        problem.phi_star = problem.phi_minimizer().map(|x| problem.phi_closed_form(&x)).unwrap_or(f64::NAN);
        problem
    }

    /// `f_i = 1/2 ||y||^2`, `g_i = 1/2 ||y - x||^2` on every node, so that
    /// `y* = z* = grad Phi = x`.
    pub fn trivial(n_nodes: usize, dim: usize) -> Self {
        let node = QuadraticNode {
            p: DMatrix::identity(dim, dim),
            q: DMatrix::zeros(dim, dim),
            q_vec: DVector::zeros(dim),
            r: DMatrix::zeros(dim, dim),
            a: DMatrix::identity(dim, dim),
            b: -DMatrix::identity(dim, dim),
            c: DVector::zeros(dim),
        };
        Self::from_nodes(vec![node; n_nodes], 0.0)
    }

    pub fn nodes(&self) -> &[QuadraticNode] {
        &self.nodes
    }

    pub fn mean_node(&self) -> &QuadraticNode {
        &self.mean
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    /// Same instance with a different oracle noise level.
    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    /// `y*(x) = M x + m` with `M = -A^{-1} B`, `m = -A^{-1} c` (mean matrices).
    pub fn y_star_affine(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        let chol = self.mean.a.clone().cholesky()?;
        Some((-chol.solve(&self.mean.b), -chol.solve(&self.mean.c)))
    }

    /// Hessian of the (quadratic) `Phi`.
    pub fn phi_hessian(&self) -> Option<DMatrix<f64>> {
        let (m, _) = self.y_star_affine()?;
        let mq = m.transpose() * &self.mean.q;
        Some(m.transpose() * &self.mean.p * &m + &mq + mq.transpose() + &self.mean.r)
    }

    fn phi_minimizer(&self) -> Option<DVector<f64>> {
        let (m, m0) = self.y_star_affine()?;
        let hess = self.phi_hessian()?;
        let grad0 = m.transpose() * (&self.mean.p * &m0 + &self.mean.q_vec) + self.mean.q.transpose() * &m0;
        Some(-hess.cholesky()?.solve(&grad0))
    }

    fn phi_closed_form(&self, x: &DVector<f64>) -> f64 {
        let (m, m0) = self.y_star_affine().expect("mean lower Hessian is positive definite");
        let y = m * x + m0;
        quad_upper(&self.mean, x, &y)
    }

    /// Minimizer of `Phi`, available when `Phi` is strongly convex.
    pub fn x_star(&self) -> Option<DVector<f64>> {
        self.phi_minimizer()
    }
}

fn quad_upper(n: &QuadraticNode, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    0.5 * y.dot(&(&n.p * y)) + y.dot(&(&n.q * x + &n.q_vec)) + 0.5 * x.dot(&(&n.r * x))
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, dim: usize, scale: f64) -> DMatrix<f64> {
    let g = gaussian(rng, dim, dim, scale);
    (&g + g.transpose()) * std::f64::consts::FRAC_1_SQRT_2
}

/// Per-node deviations with exactly zero network mean.
fn centered<T, R>(rng: &mut R, n: usize, draw: impl Fn(&mut R) -> T) -> Vec<T>
where
    R: Rng,
    T: Clone + std::ops::Sub<T, Output = T> + std::ops::Add<T, Output = T> + std::ops::Div<f64, Output = T>,
{
    let draws: Vec<T> = (0..n).map(|_| draw(rng)).collect();
    let mean = draws.iter().skip(1).fold(draws[0].clone(), |acc, d| acc + d.clone()) / n as f64;
    draws.into_iter().map(|d| d - mean.clone()).collect()
}

/// Random quadratic instance with certified strong convexity.
///
/// The mean lower Hessian has eigenvalues spread over `[1, conditioning]`.
/// Node Hessian perturbations are halved until every node keeps smallest
/// eigenvalue at least 1/2, and a multiple of the identity is added to the `R`
/// blocks so that `Phi` is 1-strongly convex.
pub fn make_quadratic(seed: u64, spec: &QuadraticSpec) -> QuadraticProblem {
    assert!(spec.n_nodes >= 1 && spec.dim_x >= 1 && spec.dim_y >= 1, "dimensions must be positive");
    assert!(spec.conditioning >= 1.0, "conditioning must be at least 1");
    let (n, d, p) = (spec.n_nodes, spec.dim_x, spec.dim_y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sp = 1.0 / (p as f64).sqrt();

    let basis = gaussian(&mut rng, p, p, 1.0).qr().q();
    let spectrum = DVector::from_fn(p, |k, _| {
        if p == 1 { 1.0 } else { 1.0 + (spec.conditioning - 1.0) * k as f64 / (p - 1) as f64 }
    });
    let a_bar = &basis * DMatrix::from_diagonal(&spectrum) * basis.transpose();
    let b_bar = gaussian(&mut rng, p, d, sp);
    let c_bar = gaussian_vec(&mut rng, p, 1.0);
    let g = gaussian(&mut rng, p, p, sp);
    let p_bar = &g * g.transpose() + DMatrix::identity(p, p) * 0.1;
    let q_bar = gaussian(&mut rng, p, d, sp);
    let qv_bar = gaussian_vec(&mut rng, p, 1.0);

    let h = spec.heterogeneity;
    let da = centered(&mut rng, n, |r| symmetric(r, p, sp));
    let db = centered(&mut rng, n, |r| gaussian(r, p, d, sp));
    let dc = centered(&mut rng, n, |r| gaussian_vec(r, p, 1.0));
    let dp = centered(&mut rng, n, |r| symmetric(r, p, sp));
    let dq = centered(&mut rng, n, |r| gaussian(r, p, d, sp));
    let dqv = centered(&mut rng, n, |r| gaussian_vec(r, p, 1.0));

    let mut a_scale = h;
    let a_nodes = loop {
        let nodes: Vec<DMatrix<f64>> = da.iter().map(|e| &a_bar + e * a_scale).collect();
        if a_scale == 0.0 || nodes.iter().all(|a| min_eigenvalue(a) >= 0.5) {
            break nodes;
        }
        a_scale *= 0.5;
    };

    let r0 = DMatrix::identity(d, d);
    let mut nodes: Vec<QuadraticNode> = (0..n)
        .map(|i| QuadraticNode {
            p: &p_bar + &dp[i] * h,
            q: &q_bar + &dq[i] * h,
            q_vec: &qv_bar + &dqv[i] * h,
            r: r0.clone(),
            a: a_nodes[i].clone(),
            b: &b_bar + &db[i] * h,
            c: &c_bar + &dc[i] * h,
        })
        .collect();

    let probe = QuadraticProblem::from_nodes(nodes.clone(), spec.noise);
    let hess = probe.phi_hessian().expect("mean lower Hessian is positive definite");
    let lam = min_eigenvalue(&hess);
    if lam < 1.0 {
        let shift = DMatrix::identity(d, d) * (1.0 - lam);
        for node in &mut nodes {
            node.r += &shift;
        }
    }
    QuadraticProblem::from_nodes(nodes, spec.noise)
}

impl BilevelProblem for QuadraticProblem {
    type UpperSample = Option<UpperNoise>;
    type LowerSample = Option<LowerNoise>;

    fn n_nodes(&self) -> usize {
        self.nodes.len()
    }
    fn dim_x(&self) -> usize {
        self.mean.r.nrows()
    }
    fn dim_y(&self) -> usize {
        self.mean.a.nrows()
    }

    fn constants(&self) -> ProblemConstants {
        let joint_norm = |top_left: &DMatrix<f64>, off: &DMatrix<f64>, bottom_right: &DMatrix<f64>| {
            let (d, p) = (top_left.nrows(), bottom_right.nrows());
            let mut m = DMatrix::zeros(d + p, d + p);
            m.view_mut((0, 0), (d, d)).copy_from(top_left);
            m.view_mut((d, 0), (p, d)).copy_from(off);
            m.view_mut((0, d), (d, p)).copy_from(&off.transpose());
            m.view_mut((d, d), (p, p)).copy_from(bottom_right);
            m.singular_values().max()
        };
        let l_grad_f = self.nodes.iter().map(|n| joint_norm(&n.r, &n.q, &n.p)).fold(0.0, f64::max);
        let l_grad_g = self
            .nodes
            .iter()
            .map(|n| joint_norm(&DMatrix::zeros(n.r.nrows(), n.r.nrows()), &n.b, &n.a))
            .fold(0.0, f64::max);
        let b = if self.homogeneous { Some(0.0) } else { None };
        ProblemConstants {
            mu_g: self.mu_g,
            l_f: None,
            l_grad_f: Some(l_grad_f),
            l_grad_g: Some(l_grad_g),
            l_hess_g: Some(0.0),
            sigma: None,
            b1: b,
            b2: b,
        }
    }

    fn upper_value(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        quad_upper(&self.nodes[node], x, y)
    }
    fn lower_value(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let n = &self.nodes[node];
        0.5 * y.dot(&(&n.a * y)) + y.dot(&(&n.b * x + &n.c))
    }
    fn grad_upper_x(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let n = &self.nodes[node];
        n.q.tr_mul(y) + &n.r * x
    }
    fn grad_upper_y(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let n = &self.nodes[node];
        &n.p * y + &n.q * x + &n.q_vec
    }
    fn grad_lower_x(&self, node: usize, _x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.nodes[node].b.tr_mul(y)
    }
    fn grad_lower_y(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let n = &self.nodes[node];
        &n.a * y + &n.b * x + &n.c
    }
    fn hvp_lower_yy(&self, node: usize, _x: &DVector<f64>, _y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.nodes[node].a * v
    }
    fn jvp_lower_xy(&self, node: usize, _x: &DVector<f64>, _y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.nodes[node].b.tr_mul(v)
    }

    fn sample_upper<R: Rng + ?Sized>(&self, _node: usize, rng: &mut R) -> Option<UpperNoise> {
        if self.noise == 0.0 {
            return None;
        }
        Some(UpperNoise { gx: gaussian_vec(rng, self.dim_x(), self.noise), gy: gaussian_vec(rng, self.dim_y(), self.noise) })
    }

    fn sample_lower<R: Rng + ?Sized>(&self, _node: usize, rng: &mut R) -> Option<LowerNoise> {
        if self.noise == 0.0 {
            return None;
        }
        let (d, p) = (self.dim_x(), self.dim_y());
        let sp = self.noise / (p as f64).sqrt();
        Some(LowerNoise { s: symmetric(rng, p, sp), e: gaussian(rng, p, d, sp), e_vec: gaussian_vec(rng, p, self.noise) })
    }

    fn stoch_grad_upper_x(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>, s: &Option<UpperNoise>) -> DVector<f64> {
        let g = self.grad_upper_x(node, x, y);
        match s {
            Some(s) => g + &s.gx,
            None => g,
        }
    }
    fn stoch_grad_upper_y(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>, s: &Option<UpperNoise>) -> DVector<f64> {
        let g = self.grad_upper_y(node, x, y);
        match s {
            Some(s) => g + &s.gy,
            None => g,
        }
    }
    fn stoch_grad_lower_x(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>, s: &Option<LowerNoise>) -> DVector<f64> {
        let g = self.grad_lower_x(node, x, y);
        match s {
            Some(s) => g + s.e.tr_mul(y),
            None => g,
        }
    }
    fn stoch_grad_lower_y(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>, s: &Option<LowerNoise>) -> DVector<f64> {
        let g = self.grad_lower_y(node, x, y);
        match s {
            Some(s) => g + &s.s * y + &s.e * x + &s.e_vec,
            None => g,
        }
    }
    fn stoch_hvp_lower_yy(
        &self,
        node: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
        v: &DVector<f64>,
        s: &Option<LowerNoise>,
    ) -> DVector<f64> {
        let h = self.hvp_lower_yy(node, x, y, v);
        match s {
            Some(s) => h + &s.s * v,
            None => h,
        }
    }
    fn stoch_jvp_lower_xy(
        &self,
        node: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
        v: &DVector<f64>,
        s: &Option<LowerNoise>,
    ) -> DVector<f64> {
        let j = self.jvp_lower_xy(node, x, y, v);
        match s {
            Some(s) => j + s.e.tr_mul(v),
            None => j,
        }
    }

    fn analytic_y_star(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        let (m, m0) = self.y_star_affine()?;
        Some(m * x + m0)
    }

    fn phi_star(&self) -> Option<f64> {
        self.phi_star.is_finite().then_some(self.phi_star)
    }

    fn mean_upper_value(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        quad_upper(&self.mean, x, y)
    }
    fn mean_lower_value(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        0.5 * y.dot(&(&self.mean.a * y)) + y.dot(&(&self.mean.b * x + &self.mean.c))
    }
    fn mean_grad_upper_x(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.mean.q.tr_mul(y) + &self.mean.r * x
    }
    fn mean_grad_upper_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        &self.mean.p * y + &self.mean.q * x + &self.mean.q_vec
    }
    fn mean_grad_lower_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        &self.mean.a * y + &self.mean.b * x + &self.mean.c
    }
    fn mean_hvp_lower_yy(&self, _x: &DVector<f64>, _y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.mean.a * v
    }
    fn mean_jvp_lower_xy(&self, _x: &DVector<f64>, _y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.mean.b.tr_mul(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{hypergradient_exact, lower_solve, z_star, SOLVE_TOLERANCE};

    fn spec(heterogeneity: f64) -> QuadraticSpec {
        QuadraticSpec { n_nodes: 4, dim_x: 3, dim_y: 5, conditioning: 10.0, heterogeneity, noise: 0.1 }
    }

    #[test]
    fn construction_is_deterministic() {
        let a = make_quadratic(9, &spec(0.5));
        let b = make_quadratic(9, &spec(0.5));
        assert_eq!(a.nodes(), b.nodes());
    }

    #[test]
    fn certified_convexity() {
        for seed in 0..10 {
            let p = make_quadratic(seed, &spec(3.0));
            assert!(p.constants().mu_g >= 0.5 - 1e-12);
            assert!(min_eigenvalue(&p.phi_hessian().unwrap()) >= 1.0 - 1e-9);
        }
    }

    #[test]
    fn zero_heterogeneity_gives_identical_nodes() {
        let p = make_quadratic(2, &spec(0.0));
        assert!(p.nodes().iter().all(|n| n == &p.nodes()[0]));
        assert_eq!(p.constants().b1, Some(0.0));
    }

    #[test]
    fn y_star_is_linear_solve() {
        let p = make_quadratic(4, &spec(1.0));
        let x = DVector::from_row_slice(&[0.5, -1.0, 2.0]);
        let y = lower_solve(&p, &x).unwrap();
        let m = p.mean_node();
        let dense = -m.a.clone().lu().solve(&(&m.b * &x + &m.c)).unwrap();
        assert!((&y - dense).norm() < 1e-10);
        assert!(p.mean_grad_lower_y(&x, &y).norm() <= SOLVE_TOLERANCE);
    }

    #[test]
    fn z_star_matches_dense_and_obeys_norm_bound() {
        for seed in 0..10 {
            let p = make_quadratic(seed, &spec(1.0));
            let x = DVector::from_fn(3, |i, _| (i as f64 + seed as f64).sin() * 2.0);
            let z = z_star(&p, &x).unwrap();
            let y = lower_solve(&p, &x).unwrap();
            let rhs = p.mean_grad_upper_y(&x, &y);
            let dense = p.mean_node().a.clone().lu().solve(&rhs).unwrap();
            assert!((&z - dense).norm() < 1e-9);
            // ||z*|| <= ||d_y f(x, y*)|| / mu_g, with mu_g of the network objective
            let mu = min_eigenvalue(&p.mean_node().a);
            assert!(z.norm() <= rhs.norm() / mu * (1.0 + 1e-12));
        }
    }

    #[test]
    fn gradient_vanishes_at_minimizer() {
        let p = make_quadratic(6, &spec(1.0));
        let x = p.x_star().unwrap();
        assert!(hypergradient_exact(&p, &x).unwrap().norm() <= 1e-8);
    }
}
