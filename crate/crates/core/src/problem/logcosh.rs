use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::quadratic::{make_quadratic, LowerNoise, QuadraticSpec, UpperNoise};
use super::{BilevelProblem, ProblemConstants, QuadraticProblem};

/// Largest value of `|d^3/du^3 log cosh(u)|`, attained at `tanh^2(u) = 1/3`.
pub const LOGCOSH_THIRD_DERIVATIVE_MAX: f64 = 0.769_800_358_919_501; // 4 / (3 sqrt 3)

fn logcosh(u: f64) -> f64 {
    let a = u.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

fn sech2(u: f64) -> f64 {
    let t = u.tanh();
    1.0 - t * t
}

/// Quadratic family with a smooth non-quadratic lower level:
/// `g_i = 1/2 y'A y + y'(B x + c) + w * sum_j log cosh((y + K_i x)_j)`.
///
/// The extra term is convex, so `mu_g` of the quadratic part still holds,
/// while the Hessian now varies with `(x, y)`.
#[derive(Debug, Clone)]
pub struct LogCoshProblem {
    base: QuadraticProblem,
    couplings: Vec<DMatrix<f64>>,
    weight: f64,
}

pub fn make_logcosh(seed: u64, spec: &QuadraticSpec, weight: f64) -> LogCoshProblem {
    let base = make_quadratic(seed, spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let scale = 1.0 / (spec.dim_y as f64).sqrt();
    let couplings = (0..spec.n_nodes)
        .map(|_| DMatrix::from_fn(spec.dim_y, spec.dim_x, |_, _| scale * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    LogCoshProblem { base, couplings, weight }
}

impl LogCoshProblem {
    pub fn base(&self) -> &QuadraticProblem {
        &self.base
    }

    pub fn couplings(&self) -> &[DMatrix<f64>] {
        &self.couplings
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    fn arg(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        y + &self.couplings[node] * x
    }
}

impl BilevelProblem for LogCoshProblem {
    type UpperSample = Option<UpperNoise>;
    type LowerSample = Option<LowerNoise>;

    fn n_nodes(&self) -> usize {
        self.base.n_nodes()
    }
    fn dim_x(&self) -> usize {
        self.base.dim_x()
    }
    fn dim_y(&self) -> usize {
        self.base.dim_y()
    }

    /// `l_hess_g` is the analytic bound `w * max|phi'''| * max_i ||[K_i I]||^3`.
    fn constants(&self) -> ProblemConstants {
        let p = self.dim_y();
        let jac_norm = self
            .couplings
            .iter()
            .map(|k| {
                let mut j = DMatrix::zeros(p, k.ncols() + p);
                j.view_mut((0, 0), (p, k.ncols())).copy_from(k);
                j.view_mut((0, k.ncols()), (p, p)).fill_with_identity();
                j.singular_values().max()
            })
            .fold(0.0, f64::max);
        ProblemConstants {
            l_hess_g: Some(self.weight * LOGCOSH_THIRD_DERIVATIVE_MAX * jac_norm.powi(3)),
            l_grad_g: None,
            b1: None,
            b2: None,
            ..self.base.constants()
        }
    }

    fn upper_value(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.base.upper_value(node, x, y)
    }
    fn lower_value(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.base.lower_value(node, x, y) + self.weight * self.arg(node, x, y).iter().map(|&u| logcosh(u)).sum::<f64>()
    }
    fn grad_upper_x(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.base.grad_upper_x(node, x, y)
    }
    fn grad_upper_y(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.base.grad_upper_y(node, x, y)
    }
    fn grad_lower_x(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let t = self.arg(node, x, y).map(f64::tanh);
        self.base.grad_lower_x(node, x, y) + self.couplings[node].tr_mul(&t) * self.weight
    }
    fn grad_lower_y(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.base.grad_lower_y(node, x, y) + self.arg(node, x, y).map(f64::tanh) * self.weight
    }
    fn hvp_lower_yy(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let curv = self.arg(node, x, y).map(sech2);
        self.base.hvp_lower_yy(node, x, y, v) + curv.component_mul(v) * self.weight
    }
    fn jvp_lower_xy(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let curv = self.arg(node, x, y).map(sech2);
        self.base.jvp_lower_xy(node, x, y, v) + self.couplings[node].tr_mul(&curv.component_mul(v)) * self.weight
    }

    fn sample_upper<R: Rng + ?Sized>(&self, node: usize, rng: &mut R) -> Self::UpperSample {
        self.base.sample_upper(node, rng)
    }
    fn sample_lower<R: Rng + ?Sized>(&self, node: usize, rng: &mut R) -> Self::LowerSample {
        self.base.sample_lower(node, rng)
    }

    fn stoch_grad_upper_x(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>, s: &Self::UpperSample) -> DVector<f64> {
        self.base.stoch_grad_upper_x(node, x, y, s)
    }
    fn stoch_grad_upper_y(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>, s: &Self::UpperSample) -> DVector<f64> {
        self.base.stoch_grad_upper_y(node, x, y, s)
    }
    fn stoch_grad_lower_x(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>, s: &Self::LowerSample) -> DVector<f64> {
        let extra = self.grad_lower_x(node, x, y) - self.base.grad_lower_x(node, x, y);
        self.base.stoch_grad_lower_x(node, x, y, s) + extra
    }
    fn stoch_grad_lower_y(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>, s: &Self::LowerSample) -> DVector<f64> {
        self.base.stoch_grad_lower_y(node, x, y, s) + self.arg(node, x, y).map(f64::tanh) * self.weight
    }
    fn stoch_hvp_lower_yy(
        &self,
        node: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
        v: &DVector<f64>,
        s: &Self::LowerSample,
    ) -> DVector<f64> {
        let curv = self.arg(node, x, y).map(sech2);
        self.base.stoch_hvp_lower_yy(node, x, y, v, s) + curv.component_mul(v) * self.weight
    }
    fn stoch_jvp_lower_xy(
        &self,
        node: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
        v: &DVector<f64>,
        s: &Self::LowerSample,
    ) -> DVector<f64> {
        let curv = self.arg(node, x, y).map(sech2);
        self.base.stoch_jvp_lower_xy(node, x, y, v, s) + self.couplings[node].tr_mul(&curv.component_mul(v)) * self.weight
    }
}
