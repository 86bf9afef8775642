//! Doubly-stochastic mixing matrices for gossip averaging.
//!
//! A [`MixingMatrix`] holds the weights `w_ij` (information flowing from node
//! `j` into node `i`) together with the cached contraction factor
//! `rho = ||W - 11^T/n||_2`. Construction validates row and column sums, so
//! every matrix handed out by this module preserves network averages.

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row/column-sum tolerance for the built-in families.
pub const FAMILY_TOLERANCE: f64 = 1e-12;
/// Row/column-sum tolerance for user-supplied weights.
pub const CUSTOM_TOLERANCE: f64 = 1e-10;

/// Named graph families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologyKind {
    FullyConnected,
    Ring { self_weight: f64, neighbor_weight: f64 },
    AdjustedRing,
    #[serde(rename = "torus")]
    Torus2D { rows: usize, cols: usize },
    ExponentialGraph,
}

impl TopologyKind {
    /// Ring with uniform weight 1/3 on the closed neighborhood.
    pub fn uniform_ring() -> Self {
        TopologyKind::Ring { self_weight: 1.0 / 3.0, neighbor_weight: 1.0 / 3.0 }
    }

    /// Most square `rows x cols` torus with `rows * cols = n` and `rows <= cols`.
    pub fn square_torus(n: usize) -> Self {
        let mut rows = (n as f64).sqrt().floor() as usize;
        while rows > 1 && !n.is_multiple_of(rows) {
            rows -= 1;
        }
        let rows = rows.max(1);
        TopologyKind::Torus2D { rows, cols: n / rows }
    }

    pub fn label(&self) -> String {
        match self {
            TopologyKind::FullyConnected => "fully_connected".into(),
            TopologyKind::Ring { self_weight, neighbor_weight } => {
                format!("ring({self_weight},{neighbor_weight})")
            }
            TopologyKind::AdjustedRing => "adjusted_ring".into(),
            TopologyKind::Torus2D { rows, cols } => format!("torus{rows}x{cols}"),
            TopologyKind::ExponentialGraph => "exponential".into(),
        }
    }
}

/// Immutable gossip weights with cached spectral quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    weights: DMatrix<f64>,
    rho: f64,
    label: String,
}

impl MixingMatrix {
    /// Validates arbitrary weights (tolerance [`CUSTOM_TOLERANCE`]).
    ///
    /// The identity and other disconnected patterns are accepted here; they
    /// are rejected by [`MixingMatrix::spectral_gap`].
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        Self::validated(weights, CUSTOM_TOLERANCE, "custom".into())
    }

    fn validated(weights: DMatrix<f64>, tol: f64, label: String) -> Result<Self> {
        let n = weights.nrows();
        if n == 0 || weights.ncols() != n {
            return Err(Error::IncompatibleSize(format!(
                "mixing matrix must be square and non-empty, got {}x{}",
                weights.nrows(),
                weights.ncols()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonStochasticWeights("non-finite entry".into()));
        }
        for i in 0..n {
            let row: f64 = weights.row(i).sum();
            if (row - 1.0).abs() > tol {
                return Err(Error::NonStochasticWeights(format!("row {i} sums to {row}")));
            }
            let col: f64 = weights.column(i).sum();
            if (col - 1.0).abs() > tol {
                return Err(Error::NonStochasticWeights(format!("column {i} sums to {col}")));
            }
        }
        let rho = deviation_norm(&weights);
        Ok(MixingMatrix { weights, rho, label })
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// `||W - 11^T/n||_2`.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// `1 - rho`; errors when the graph does not contract disagreement.
    pub fn spectral_gap(&self) -> Result<f64> {
        if self.rho >= 1.0 - FAMILY_TOLERANCE {
            return Err(Error::SpectralGapDegenerate { rho: self.rho });
        }
        Ok(1.0 - self.rho)
    }

    /// Closed neighborhood of node `i`: every `j` with `w_ij != 0`.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n()).filter(|&j| self.weights[(i, j)] != 0.0).collect()
    }

    /// One synchronous gossip round: returns `W * rows`.
    pub fn mix(&self, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rows.nrows() != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), got: rows.nrows() });
        }
        Ok(&self.weights * rows)
    }

    /// Parses the plain-text format: `n` on the first line, then `n` rows of
    /// `n` whitespace-separated reals.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let n: usize = lines
            .next()
            .ok_or_else(|| Error::Parse("missing node count".into()))?
            .parse()
            .map_err(|e| Error::Parse(format!("node count: {e}")))?;
        let mut data = Vec::with_capacity(n * n);
        for r in 0..n {
            let line = lines.next().ok_or_else(|| Error::Parse(format!("missing row {r}")))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|tok| tok.parse::<f64>().map_err(|e| Error::Parse(format!("row {r}: `{tok}`: {e}"))))
                .collect::<Result<_>>()?;
            if row.len() != n {
                return Err(Error::Parse(format!("row {r} has {} entries, expected {n}", row.len())));
            }
            data.extend(row);
        }
        if lines.next().is_some() {
            return Err(Error::Parse(format!("trailing content after {n} rows")));
        }
        Self::from_weights(DMatrix::from_row_slice(n, n, &data))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::parse_text(&text)?.with_label(format!("file:{}", path.display())))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.n());
        for i in 0..self.n() {
            let row: Vec<String> = self.weights.row(i).iter().map(|w| format!("{w:e}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for MixingMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (n={}, rho={:.6})", self.label, self.n(), self.rho)
    }
}

/// Largest singular value of `W - 11^T/n`. W may be non-symmetric.
fn deviation_norm(weights: &DMatrix<f64>) -> f64 {
    let n = weights.nrows();
    let centered = weights.map(|w| w - 1.0 / n as f64);
    if centered.iter().all(|v| v.abs() <= FAMILY_TOLERANCE) {
        return 0.0;
    }
    centered.singular_values().max()
}

/// Builds the mixing matrix of a named family on `n` nodes.
pub fn build_topology(kind: &TopologyKind, n: usize) -> Result<MixingMatrix> {
    if n == 0 {
        return Err(Error::IncompatibleSize("n must be at least 1".into()));
    }
    let weights = match *kind {
        TopologyKind::FullyConnected => DMatrix::from_element(n, n, 1.0 / n as f64),
        TopologyKind::Ring { self_weight, neighbor_weight } => {
            require_ring(n)?;
            ring(n, self_weight, neighbor_weight)
        }
        TopologyKind::AdjustedRing => {
            require_ring(n)?;
            ring(n, 0.2, 0.4)
        }
        TopologyKind::Torus2D { rows, cols } => {
            if rows == 0 || cols == 0 || rows * cols != n {
                return Err(Error::IncompatibleSize(format!("torus {rows}x{cols} cannot hold {n} nodes")));
            }
            torus(rows, cols)
        }
        TopologyKind::ExponentialGraph => exponential(n),
    };
    MixingMatrix::validated(weights, FAMILY_TOLERANCE, kind.label())
}

fn require_ring(n: usize) -> Result<()> {
    if n < 3 {
        return Err(Error::IncompatibleSize(format!("ring needs at least 3 nodes, got {n}")));
    }
    Ok(())
}

fn ring(n: usize, self_weight: f64, neighbor_weight: f64) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        w[(i, i)] = self_weight;
        w[(i, (i + 1) % n)] = neighbor_weight;
        w[(i, (i + n - 1) % n)] = neighbor_weight;
    }
    w
}

/// Uniform weights over the closed neighborhood on a wrap-around grid.
fn torus(rows: usize, cols: usize) -> DMatrix<f64> {
    let n = rows * cols;
    let idx = |r: usize, c: usize| r * cols + c;
    let mut w = DMatrix::zeros(n, n);
    for r in 0..rows {
        for c in 0..cols {
            let i = idx(r, c);
            let mut hood = vec![
                i,
                idx((r + 1) % rows, c),
                idx((r + rows - 1) % rows, c),
                idx(r, (c + 1) % cols),
                idx(r, (c + cols - 1) % cols),
            ];
            hood.sort_unstable();
            hood.dedup();
            let share = 1.0 / hood.len() as f64;
            for j in hood {
                w[(i, j)] = share;
            }
        }
    }
    w
}

/// Node `i` listens to `i + 2^k mod n` for every power of two below `n`.
fn exponential(n: usize) -> DMatrix<f64> {
    let mut offsets = vec![0usize];
    let mut step = 1usize;
    while step < n {
        offsets.push(step);
        step *= 2;
    }
    let share = 1.0 / offsets.len() as f64;
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for &o in &offsets {
            w[(i, (i + o) % n)] = share;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fully_connected_is_exact_average() {
        let w = build_topology(&TopologyKind::FullyConnected, 4).unwrap();
        assert!(w.weights().iter().all(|&v| v == 0.25));
        assert_eq!(w.rho(), 0.0);
        assert_eq!(w.spectral_gap().unwrap(), 1.0);
    }

    #[test]
    fn adjusted_ring_weights() {
        let w = build_topology(&TopologyKind::AdjustedRing, 9).unwrap();
        for i in 0..9 {
            for j in 0..9 {
                let d = (j + 9 - i) % 9;
                let expected = match d {
                    0 => 0.2,
                    1 | 8 => 0.4,
                    _ => 0.0,
                };
                assert_eq!(w.weights()[(i, j)], expected);
            }
        }
        // circulant eigenvalues 0.2 + 0.8 cos(2 pi k / 9), k = 1..8
        let expected = (1..9)
            .map(|k| (0.2 + 0.8 * (2.0 * std::f64::consts::PI * k as f64 / 9.0).cos()).abs())
            .fold(0.0, f64::max);
        assert!((w.rho() - expected).abs() < 1e-12);
        assert!((w.rho() - 0.8128).abs() < 1e-4);
        assert!((w.spectral_gap().unwrap() - 0.1872).abs() < 1e-4);
    }

    #[test]
    fn incompatible_sizes() {
        let err = build_topology(&TopologyKind::Torus2D { rows: 3, cols: 3 }, 10).unwrap_err();
        assert!(matches!(err, Error::IncompatibleSize(_)));
        assert!(matches!(build_topology(&TopologyKind::AdjustedRing, 2), Err(Error::IncompatibleSize(_))));
    }

    #[test]
    fn bad_ring_weights_rejected() {
        let kind = TopologyKind::Ring { self_weight: 0.5, neighbor_weight: 0.5 };
        assert!(matches!(build_topology(&kind, 5), Err(Error::NonStochasticWeights(_))));
    }

    #[test]
    fn identity_has_degenerate_gap() {
        let w = MixingMatrix::from_weights(DMatrix::identity(5, 5)).unwrap();
        assert!(matches!(w.spectral_gap(), Err(Error::SpectralGapDegenerate { .. })));
    }

    #[test]
    fn mix_checks_rows() {
        let w = build_topology(&TopologyKind::AdjustedRing, 5).unwrap();
        let err = w.mix(&DMatrix::zeros(4, 2)).unwrap_err();
        assert_eq!(err, Error::DimensionMismatch { expected: 5, got: 4 });
    }

    #[test]
    fn mix_fixes_consensus_rows() {
        let w = build_topology(&TopologyKind::ExponentialGraph, 6).unwrap();
        let rows = DMatrix::from_fn(6, 3, |_, c| c as f64 - 1.5);
        let out = w.mix(&rows).unwrap();
        assert!((out - rows).abs().max() < 1e-15);
    }

    #[test]
    fn neighbors_follow_sparsity() {
        let w = build_topology(&TopologyKind::Torus2D { rows: 3, cols: 3 }, 9).unwrap();
        assert_eq!(w.neighbors(4), vec![1, 3, 4, 5, 7]);
        let w = build_topology(&TopologyKind::ExponentialGraph, 8).unwrap();
        assert_eq!(w.neighbors(0), vec![0, 1, 2, 4]);
    }

    #[test]
    fn text_format() {
        let w = build_topology(&TopologyKind::AdjustedRing, 4).unwrap();
        let parsed = MixingMatrix::parse_text(&w.to_text()).unwrap();
        assert_eq!(parsed.weights(), w.weights());

        assert!(matches!(MixingMatrix::parse_text("2\n1 0\n"), Err(Error::Parse(_))));
        assert!(matches!(MixingMatrix::parse_text("2\n1 0\n0.5 0.5\n"), Err(Error::NonStochasticWeights(_))));
        assert!(matches!(MixingMatrix::parse_text("2\n1 x\n0 1\n"), Err(Error::Parse(_))));
    }

    #[test]
    fn square_torus_factorization() {
        assert_eq!(TopologyKind::square_torus(9), TopologyKind::Torus2D { rows: 3, cols: 3 });
        assert_eq!(TopologyKind::square_torus(20), TopologyKind::Torus2D { rows: 4, cols: 5 });
        assert_eq!(TopologyKind::square_torus(7), TopologyKind::Torus2D { rows: 1, cols: 7 });
    }
}
