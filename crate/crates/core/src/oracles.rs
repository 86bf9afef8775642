//! Direction estimates for the single-loop updates.
//!
//! For node `i` at `(x, y, z)` the exact directions are
//!
//! ```text
//! d_x = d_x f_i - d2_xy g_i z      (hypergradient surrogate)
//! d_y = d_y g_i                    (lower-level descent)
//! d_z = d2_yy g_i z - d_y f_i      (linear-system residual for z)
//! ```
//!
//! The stochastic versions replace every term with a sampled oracle. The two
//! Hessian-vector terms come either from sampled second-order products or from
//! central differences of sampled first-order gradients; the differences reuse
//! a single lower-level sample for both evaluations.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::BilevelProblem;

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionTriple {
    pub d_x: DVector<f64>,
    pub d_y: DVector<f64>,
    pub d_z: DVector<f64>,
}

impl DirectionTriple {
    pub fn is_finite(&self) -> bool {
        self.d_x.iter().chain(self.d_y.iter()).chain(self.d_z.iter()).all(|v| v.is_finite())
    }
}

/// How the Hessian/Jacobian-vector products are formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum HvpMode {
    SecondOrder,
    FiniteDifference { delta: f64 },
}

/// Estimates of `d2_yy g_i z` (`p_h`) and `d2_xy g_i z` (`p_j`).
#[derive(Debug, Clone, PartialEq)]
pub struct HvpPair {
    pub p_h: DVector<f64>,
    pub p_j: DVector<f64>,
    pub mode: HvpMode,
}

fn check_dims<P: BilevelProblem>(problem: &P, node: usize, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> Result<()> {
    if node >= problem.n_nodes() {
        return Err(Error::DimensionMismatch { expected: problem.n_nodes(), got: node });
    }
    for (expected, v) in [(problem.dim_x(), x), (problem.dim_y(), y), (problem.dim_y(), z)] {
        if v.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: v.len() });
        }
    }
    Ok(())
}

/// Exact directions from the deterministic oracles.
pub fn directions_deterministic<P: BilevelProblem>(
    problem: &P,
    node: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<DirectionTriple> {
    check_dims(problem, node, x, y, z)?;
    Ok(DirectionTriple {
        d_x: problem.grad_upper_x(node, x, y) - problem.jvp_lower_xy(node, x, y, z),
        d_y: problem.grad_lower_y(node, x, y),
        d_z: problem.hvp_lower_yy(node, x, y, z) - problem.grad_upper_y(node, x, y),
    })
}

/// Sampled second-order products for one lower-level sample.
pub fn hvp_so<P: BilevelProblem>(
    problem: &P,
    node: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
    sample: &P::LowerSample,
) -> HvpPair {
    HvpPair {
        p_h: problem.stoch_hvp_lower_yy(node, x, y, z, sample),
        p_j: problem.stoch_jvp_lower_xy(node, x, y, z, sample),
        mode: HvpMode::SecondOrder,
    }
}

/// Central differences of sampled gradients along `z` with step `delta`.
pub fn hvp_fo<P: BilevelProblem>(
    problem: &P,
    node: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
    delta: f64,
    sample: &P::LowerSample,
) -> Result<HvpPair> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::DegenerateDelta(delta));
    }
    let plus = y + z * delta;
    let minus = y - z * delta;
    let scale = 0.5 / delta;
    let p_h = (problem.stoch_grad_lower_y(node, x, &plus, sample) - problem.stoch_grad_lower_y(node, x, &minus, sample)) * scale;
    let p_j = (problem.stoch_grad_lower_x(node, x, &plus, sample) - problem.stoch_grad_lower_x(node, x, &minus, sample)) * scale;
    Ok(HvpPair { p_h, p_j, mode: HvpMode::FiniteDifference { delta } })
}

/// Dispatches on `mode`.
pub fn hvp<P: BilevelProblem>(
    problem: &P,
    node: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
    mode: HvpMode,
    sample: &P::LowerSample,
) -> Result<HvpPair> {
    match mode {
        HvpMode::SecondOrder => Ok(hvp_so(problem, node, x, y, z, sample)),
        HvpMode::FiniteDifference { delta } => hvp_fo(problem, node, x, y, z, delta, sample),
    }
}

/// Sampled directions; `d_x` is the moving-average input
/// `d_x F(x, y; xi) - p_j`.
#[allow(clippy::too_many_arguments)]
pub fn directions_stochastic<P: BilevelProblem>(
    problem: &P,
    node: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
    mode: HvpMode,
    upper: &P::UpperSample,
    lower: &P::LowerSample,
) -> Result<DirectionTriple> {
    check_dims(problem, node, x, y, z)?;
    let pair = hvp(problem, node, x, y, z, mode, lower)?;
    Ok(DirectionTriple {
        d_x: problem.stoch_grad_upper_x(node, x, y, upper) - pair.p_j,
        d_y: problem.stoch_grad_lower_y(node, x, y, lower),
        d_z: pair.p_h - problem.stoch_grad_upper_y(node, x, y, upper),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{make_quadratic, QuadraticProblem, QuadraticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(data: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(data)
    }

    #[test]
    fn trivial_instance_directions() {
        let p = QuadraticProblem::trivial(2, 1);
        let zero = directions_deterministic(&p, 0, &v(&[0.0]), &v(&[0.0]), &v(&[0.0])).unwrap();
        assert_eq!(zero.d_x, v(&[0.0]));
        assert_eq!(zero.d_y, v(&[0.0]));
        assert_eq!(zero.d_z, v(&[0.0]));

        let d = directions_deterministic(&p, 1, &v(&[1.0]), &v(&[0.0]), &v(&[0.0])).unwrap();
        assert_eq!(d.d_x, v(&[0.0]));
        assert_eq!(d.d_y, v(&[-1.0]));
        assert_eq!(d.d_z, v(&[0.0]));
    }

    #[test]
    fn dimension_mismatch() {
        let p = QuadraticProblem::trivial(2, 2);
        let err = directions_deterministic(&p, 0, &v(&[0.0]), &v(&[0.0, 0.0]), &v(&[0.0, 0.0])).unwrap_err();
        assert_eq!(err, Error::DimensionMismatch { expected: 2, got: 1 });
    }

    #[test]
    fn zero_z_gives_zero_products() {
        let spec = QuadraticSpec { n_nodes: 3, dim_x: 2, dim_y: 4, conditioning: 5.0, heterogeneity: 1.0, noise: 0.5 };
        let p = make_quadratic(1, &spec);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = p.sample_lower(0, &mut rng);
        let (x, y, z) = (v(&[1.0, 2.0]), v(&[0.1, 0.2, 0.3, 0.4]), DVector::zeros(4));
        let so = hvp_so(&p, 0, &x, &y, &z, &s);
        assert_eq!(so.p_h.norm(), 0.0);
        assert_eq!(so.p_j.norm(), 0.0);
        let fo = hvp_fo(&p, 0, &x, &y, &z, 0.1, &s).unwrap();
        assert_eq!(fo.p_h.norm(), 0.0);
        assert_eq!(fo.p_j.norm(), 0.0);
    }

    #[test]
    fn degenerate_delta() {
        let p = QuadraticProblem::trivial(1, 1);
        let err = hvp_fo(&p, 0, &v(&[0.0]), &v(&[0.0]), &v(&[1.0]), 0.0, &None).unwrap_err();
        assert_eq!(err, Error::DegenerateDelta(0.0));
        assert!(hvp_fo(&p, 0, &v(&[0.0]), &v(&[0.0]), &v(&[1.0]), -1e-3, &None).is_err());
    }

    #[test]
    fn finite_differences_exact_on_quadratics() {
        let spec = QuadraticSpec { n_nodes: 2, dim_x: 3, dim_y: 4, conditioning: 8.0, heterogeneity: 0.7, noise: 0.3 };
        let p = make_quadratic(5, &spec);
        let (x, y, z) = (v(&[0.5, -0.5, 1.0]), v(&[1.0, 0.0, -1.0, 2.0]), v(&[0.3, -0.8, 0.1, 0.4]));
        for delta in [1e-1, 1e-3, 1.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let s = p.sample_lower(1, &mut rng);
            let so = hvp_so(&p, 1, &x, &y, &z, &s);
            let fo = hvp_fo(&p, 1, &x, &y, &z, delta, &s).unwrap();
            assert!((so.p_h - fo.p_h).norm() < 1e-10);
            assert!((so.p_j - fo.p_j).norm() < 1e-10);
        }
    }
}
