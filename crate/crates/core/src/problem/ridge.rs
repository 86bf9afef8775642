//! Ridge-parameter tuning on streaming linear-regression data.
//!
//! Node `i` observes `(a, b)` with `a ~ U(-h, h)^p`, `h = 2 * 1.5^(1/3)`, and
//! `b = a'w_i + N(0, 1)`. The losses are
//! `f_i(x, y) = E (a'y - b)^2` and `g_i(x, y) = E (a'y - b)^2 + |x| ||y||^2`,
//! with population forms `s ||y - w_i||^2 + 1` where `s = h^2 / 3` is the
//! per-coordinate feature variance.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::{BilevelProblem, ProblemConstants};

/// Half-width of the feature distribution.
pub fn feature_half_width() -> f64 {
    2.0 * 1.5f64.cbrt()
}

/// Generation parameters for [`make_ridge_tuning`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeTuningSpec {
    /// Regression dimension `p`.
    pub dim: usize,
    /// Variance of the per-node offsets `w_i - w` (0.5 mild, 2.0 severe).
    pub heterogeneity: f64,
}

/// One streamed observation.
#[derive(Debug, Clone)]
pub struct RidgeSample {
    pub features: DVector<f64>,
    pub label: f64,
}

#[derive(Debug, Clone)]
pub struct RidgeTuningProblem {
    targets: Vec<DVector<f64>>,
    mean_target: DVector<f64>,
    target_spread: f64,
    variance: f64,
    features: Uniform<f64>,
}

/// Draws the base vector `w ~ U(0, 10)^p` and node offsets
/// `eps_i ~ N(0, heterogeneity * I)`.
///
/// Offsets are generated as `sqrt(heterogeneity) * n_i` from one fixed
/// standard-normal draw per seed, so instances that differ only in
/// heterogeneity are scaled copies of each other.
pub fn make_ridge_tuning(seed: u64, spec: &RidgeTuningSpec, n_nodes: usize) -> RidgeTuningProblem {
    assert!(spec.dim >= 1 && n_nodes >= 1, "dimensions must be positive");
    assert!(spec.heterogeneity >= 0.0, "heterogeneity must be non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = DVector::from_fn(spec.dim, |_, _| rng.random_range(0.0..10.0));
    let scale = spec.heterogeneity.sqrt();
    let targets: Vec<DVector<f64>> = (0..n_nodes)
        .map(|_| {
            let offset = DVector::from_fn(spec.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            &base + offset * scale
        })
        .collect();
    RidgeTuningProblem::from_targets(targets)
}

impl RidgeTuningProblem {
    pub fn from_targets(targets: Vec<DVector<f64>>) -> Self {
        let n = targets.len() as f64;
        let mean_target = targets.iter().skip(1).fold(targets[0].clone(), |acc, t| acc + t) / n;
        let target_spread = targets.iter().map(|t| (t - &mean_target).norm_squared()).sum::<f64>() / n;
        let h = feature_half_width();
        RidgeTuningProblem {
            targets,
            mean_target,
            target_spread,
            variance: h * h / 3.0,
            features: Uniform::new(-h, h).expect("valid interval"),
        }
    }

    pub fn targets(&self) -> &[DVector<f64>] {
        &self.targets
    }

    pub fn mean_target(&self) -> &DVector<f64> {
        &self.mean_target
    }

    /// Per-coordinate feature variance `s`.
    pub fn feature_variance(&self) -> f64 {
        self.variance
    }

    fn draw<R: Rng + ?Sized>(&self, node: usize, rng: &mut R) -> RidgeSample {
        let features = DVector::from_fn(self.targets[0].len(), |_, _| self.features.sample(rng));
        let noise: f64 = rng.sample(StandardNormal);
        let label = features.dot(&self.targets[node]) + noise;
        RidgeSample { features, label }
    }

    fn residual_grad(s: &RidgeSample, y: &DVector<f64>) -> DVector<f64> {
        &s.features * (2.0 * (s.features.dot(y) - s.label))
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl BilevelProblem for RidgeTuningProblem {
    type UpperSample = RidgeSample;
    type LowerSample = RidgeSample;

    fn n_nodes(&self) -> usize {
        self.targets.len()
    }
    fn dim_x(&self) -> usize {
        1
    }
    fn dim_y(&self) -> usize {
        self.mean_target.len()
    }

    fn constants(&self) -> ProblemConstants {
        let homogeneous = self.target_spread == 0.0;
        ProblemConstants {
            mu_g: 2.0 * self.variance,
            l_grad_f: Some(2.0 * self.variance),
            b1: homogeneous.then_some(0.0),
            b2: homogeneous.then_some(0.0),
            ..ProblemConstants::default()
        }
    }

    fn upper_value(&self, node: usize, _x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.variance * (y - &self.targets[node]).norm_squared() + 1.0
    }
    fn lower_value(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.upper_value(node, x, y) + x[0].abs() * y.norm_squared()
    }
    fn grad_upper_x(&self, _node: usize, _x: &DVector<f64>, _y: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(1)
    }
    fn grad_upper_y(&self, node: usize, _x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        (y - &self.targets[node]) * (2.0 * self.variance)
    }
    fn grad_lower_x(&self, _node: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, sign(x[0]) * y.norm_squared())
    }
    fn grad_lower_y(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.grad_upper_y(node, x, y) + y * (2.0 * x[0].abs())
    }
    fn hvp_lower_yy(&self, _node: usize, x: &DVector<f64>, _y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        v * (2.0 * (self.variance + x[0].abs()))
    }
    fn jvp_lower_xy(&self, _node: usize, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, 2.0 * sign(x[0]) * y.dot(v))
    }

    fn sample_upper<R: Rng + ?Sized>(&self, node: usize, rng: &mut R) -> RidgeSample {
        self.draw(node, rng)
    }
    fn sample_lower<R: Rng + ?Sized>(&self, node: usize, rng: &mut R) -> RidgeSample {
        self.draw(node, rng)
    }

    fn stoch_grad_upper_x(&self, _node: usize, _x: &DVector<f64>, _y: &DVector<f64>, _s: &RidgeSample) -> DVector<f64> {
        DVector::zeros(1)
    }
    fn stoch_grad_upper_y(&self, _node: usize, _x: &DVector<f64>, y: &DVector<f64>, s: &RidgeSample) -> DVector<f64> {
        Self::residual_grad(s, y)
    }
    fn stoch_grad_lower_x(&self, node: usize, x: &DVector<f64>, y: &DVector<f64>, _s: &RidgeSample) -> DVector<f64> {
        self.grad_lower_x(node, x, y)
    }
    fn stoch_grad_lower_y(&self, _node: usize, x: &DVector<f64>, y: &DVector<f64>, s: &RidgeSample) -> DVector<f64> {
        Self::residual_grad(s, y) + y * (2.0 * x[0].abs())
    }
    fn stoch_hvp_lower_yy(
        &self,
        _node: usize,
        x: &DVector<f64>,
        _y: &DVector<f64>,
        v: &DVector<f64>,
        s: &RidgeSample,
    ) -> DVector<f64> {
        &s.features * (2.0 * s.features.dot(v)) + v * (2.0 * x[0].abs())
    }
    fn stoch_jvp_lower_xy(
        &self,
        node: usize,
        x: &DVector<f64>,
        y: &DVector<f64>,
        v: &DVector<f64>,
        _s: &RidgeSample,
    ) -> DVector<f64> {
        self.jvp_lower_xy(node, x, y, v)
    }

    fn analytic_y_star(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        Some(&self.mean_target * (self.variance / (self.variance + x[0].abs())))
    }

    /// `Phi` is minimized at `x = 0` where `y* = mean w_i`.
    fn phi_star(&self) -> Option<f64> {
        Some(self.variance * self.target_spread + 1.0)
    }

    fn mean_upper_value(&self, _x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.variance * ((y - &self.mean_target).norm_squared() + self.target_spread) + 1.0
    }
    fn mean_lower_value(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.mean_upper_value(x, y) + x[0].abs() * y.norm_squared()
    }
    fn mean_grad_upper_y(&self, _x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        (y - &self.mean_target) * (2.0 * self.variance)
    }
    fn mean_grad_lower_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        (y - &self.mean_target) * (2.0 * self.variance) + y * (2.0 * x[0].abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{hypergradient_exact, lower_solve, phi_value};

    #[test]
    fn feature_variance_closed_form() {
        // Var U(-h, h) = h^2 / 3 = 4 * 1.5^(2/3) / 3
        let p = make_ridge_tuning(0, &RidgeTuningSpec { dim: 3, heterogeneity: 1.0 }, 2);
        assert!((p.feature_variance() - 4.0 * 1.5f64.powf(2.0 / 3.0) / 3.0).abs() < 1e-14);
    }

    #[test]
    fn experiment_settings_build() {
        let severe = make_ridge_tuning(1, &RidgeTuningSpec { dim: 10, heterogeneity: 2.0 }, 9);
        assert_eq!((severe.n_nodes(), severe.dim_y()), (9, 10));
        let mild = make_ridge_tuning(1, &RidgeTuningSpec { dim: 10, heterogeneity: 0.5 }, 20);
        assert_eq!((mild.n_nodes(), mild.dim_y()), (20, 10));
        assert!(severe.constants().mu_g > 0.0);
    }

    #[test]
    fn heterogeneity_scales_offsets() {
        let mild = make_ridge_tuning(4, &RidgeTuningSpec { dim: 5, heterogeneity: 0.5 }, 6);
        let severe = make_ridge_tuning(4, &RidgeTuningSpec { dim: 5, heterogeneity: 2.0 }, 6);
        // sqrt(2.0 / 0.5) = 2
        for (m, s) in mild.targets().iter().zip(severe.targets()) {
            let base_m = m - mild.mean_target();
            let base_s = s - severe.mean_target();
            assert!((base_s - base_m * 2.0).norm() < 1e-12);
        }
    }

    #[test]
    fn homogeneous_nodes_agree() {
        let p = make_ridge_tuning(2, &RidgeTuningSpec { dim: 4, heterogeneity: 0.0 }, 5);
        let x = DVector::from_element(1, 0.3);
        let y = DVector::from_fn(4, |i, _| i as f64);
        let global = p.mean_grad_lower_y(&x, &y);
        for i in 0..5 {
            assert!((p.grad_lower_y(i, &x, &y) - &global).norm() < 1e-12);
        }
        assert_eq!(p.constants().b2, Some(0.0));
    }

    #[test]
    fn population_solution_at_zero_is_mean_target() {
        let p = make_ridge_tuning(3, &RidgeTuningSpec { dim: 10, heterogeneity: 2.0 }, 9);
        let x = DVector::zeros(1);
        let y = lower_solve(&p, &x).unwrap();
        assert!((y - p.mean_target()).norm() < 1e-12);
        assert_eq!(hypergradient_exact(&p, &x).unwrap()[0], 0.0);
        assert!((phi_value(&p, &x).unwrap() - p.phi_star().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn phi_star_is_minimum() {
        let p = make_ridge_tuning(3, &RidgeTuningSpec { dim: 10, heterogeneity: 0.5 }, 9);
        for &x in &[-1.0, -0.1, 0.05, 2.0] {
            assert!(phi_value(&p, &DVector::from_element(1, x)).unwrap() > p.phi_star().unwrap());
        }
    }
}
