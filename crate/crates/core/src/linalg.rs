//! Small matrix-free helpers.

use nalgebra::DVector;

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: DVector<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves `A x = b` for symmetric positive definite `A` given only `v -> A v`.
///
/// Stops when `||A x - b|| <= tol`. Breaks down (returns `converged = false`)
/// if a non-positive curvature direction is met.
pub fn conjugate_gradient<F>(apply: F, b: &DVector<f64>, tol: f64, max_iter: usize) -> CgSolution
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.norm_squared();
    let mut iterations = 0;
    while rs.sqrt() > tol && iterations < max_iter {
        let ap = apply(&p);
        let curvature = p.dot(&ap);
        if curvature <= 0.0 || !curvature.is_finite() {
            return CgSolution { x, residual: rs.sqrt(), iterations, converged: false };
        }
        let step = rs / curvature;
        x.axpy(step, &p, 1.0);
        r.axpy(-step, &ap, 1.0);
        let rs_next = r.norm_squared();
        p = &r + &p * (rs_next / rs);
        rs = rs_next;
        iterations += 1;
        // recompute the true residual periodically to shed accumulated drift
        if iterations % 50 == 0 {
            r = b - apply(&x);
            rs = r.norm_squared();
        }
    }
    let residual = (b - apply(&x)).norm();
    CgSolution { x, residual, iterations, converged: residual <= tol }
}

/// Sample mean and standard error of the mean (zero for a single sample).
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}
