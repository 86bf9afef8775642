//! Dense reference computations shared by the integration tests.
#![allow(dead_code)]

use dsoba::problem::{QuadraticNode, QuadraticProblem};
use nalgebra::{DMatrix, DVector};

/// Network-averaged quadratic data, recomputed from the node list.
pub struct DenseQuadratic {
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub q_vec: DVector<f64>,
    pub r: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl DenseQuadratic {
    pub fn new(problem: &QuadraticProblem) -> Self {
        let nodes = problem.nodes();
        let k = nodes.len() as f64;
        let avg_m = |f: fn(&QuadraticNode) -> &DMatrix<f64>| nodes.iter().map(f).fold(DMatrix::zeros(f(&nodes[0]).nrows(), f(&nodes[0]).ncols()), |acc, m| acc + m) / k;
        let avg_v = |f: fn(&QuadraticNode) -> &DVector<f64>| nodes.iter().map(f).fold(DVector::zeros(f(&nodes[0]).len()), |acc, v| acc + v) / k;
        DenseQuadratic {
            p: avg_m(|n| &n.p),
            q: avg_m(|n| &n.q),
            q_vec: avg_v(|n| &n.q_vec),
            r: avg_m(|n| &n.r),
            a: avg_m(|n| &n.a),
            b: avg_m(|n| &n.b),
            c: avg_v(|n| &n.c),
        }
    }

    pub fn y_star(&self, x: &DVector<f64>) -> DVector<f64> {
        -self.a.clone().lu().solve(&(&self.b * x + &self.c)).expect("invertible")
    }

    pub fn phi(&self, x: &DVector<f64>) -> f64 {
        let y = self.y_star(x);
        0.5 * y.dot(&(&self.p * &y)) + y.dot(&(&self.q * x + &self.q_vec)) + 0.5 * x.dot(&(&self.r * x))
    }

    /// Chain rule through `y*(x) = M x + m`, `M = -A^{-1} B`.
    pub fn grad_phi(&self, x: &DVector<f64>) -> DVector<f64> {
        let y = self.y_star(x);
        let m = -self.a.clone().lu().solve(&self.b).expect("invertible");
        self.q.transpose() * &y + &self.r * x + m.transpose() * (&self.p * &y + &self.q * x + &self.q_vec)
    }
}

/// Central differences of `f` with step `h`.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |k, _| {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[k] += h;
        minus[k] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    })
}

/// Row and column sums of `w` within `tol` of one, entries non-negative.
pub fn doubly_stochastic(w: &DMatrix<f64>, tol: f64) -> bool {
    let n = w.nrows();
    (0..n).all(|i| (w.row(i).iter().sum::<f64>() - 1.0).abs() <= tol && (w.column(i).iter().sum::<f64>() - 1.0).abs() <= tol)
        && w.iter().all(|&v| v >= 0.0)
}

/// Replaces every row by the row mean.
pub fn center(u: &DMatrix<f64>) -> DMatrix<f64> {
    let n = u.nrows();
    let mean = DMatrix::from_fn(1, u.ncols(), |_, c| u.column(c).sum() / n as f64);
    DMatrix::from_fn(n, u.ncols(), |i, c| u[(i, c)] - mean[(0, c)])
}
