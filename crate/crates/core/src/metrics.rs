//! Probed quantities, transient-iteration estimates and across-seed summaries.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::engine::{column_means, SwarmState, Variant};
use crate::error::{Error, Result};
use crate::linalg::mean_and_stderr;
use crate::problem::{hypergradient_exact, phi_value, BilevelProblem};

/// Default trailing-median window for transient estimates.
pub const DEFAULT_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub problem_seed: Option<u64>,
    pub run_seed: u64,
    pub topology: String,
    pub variant: Variant,
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub phi_star: Option<f64>,
}

/// Metrics at one probe iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub t: usize,
    /// `||grad Phi(x_bar)||^2`.
    pub grad_sq_norm: f64,
    /// `Phi(x_bar) - Phi*` when `Phi*` is known.
    pub phi_gap: Option<f64>,
    pub consensus_error: f64,
    /// `(1/n) sum_i f(x_i, y_i)` with the network upper objective `f`.
    pub upper_loss: f64,
    pub alpha: f64,
}

impl Probe {
    fn is_finite(&self) -> bool {
        self.grad_sq_norm.is_finite()
            && self.phi_gap.is_none_or(f64::is_finite)
            && self.consensus_error.is_finite()
            && self.upper_loss.is_finite()
            && self.alpha.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub metadata: RunMetadata,
    pub probes: Vec<Probe>,
}

impl RunRecord {
    pub fn grid(&self) -> Vec<usize> {
        self.probes.iter().map(|p| p.t).collect()
    }

    pub fn last(&self) -> Option<&Probe> {
        self.probes.last()
    }
}

/// `(||X - X_bar||_F^2 + ||Y - Y_bar||_F^2 + ||Z - Z_bar||_F^2) / n`.
pub fn consensus_error(state: &SwarmState) -> f64 {
    let n = state.n();
    let deviation = |m: &nalgebra::DMatrix<f64>| {
        let mean = column_means(m);
        m.row_iter().map(|row| (row.transpose() - &mean).norm_squared()).sum::<f64>()
    };
    (deviation(&state.x) + deviation(&state.y) + deviation(&state.z)) / n as f64
}

/// `||grad Phi(x_bar)||^2` at the row mean of `X`.
pub fn hypergrad_sq_norm<P: BilevelProblem>(problem: &P, state: &SwarmState) -> Result<f64> {
    Ok(hypergradient_exact(problem, &state.mean_x())?.norm_squared())
}

/// Network upper loss averaged over the local iterates.
pub fn upper_loss<P: BilevelProblem>(problem: &P, state: &SwarmState) -> f64 {
    let n = state.n();
    (0..n)
        .map(|i| {
            let x = state.x.row(i).transpose();
            let y = state.y.row(i).transpose();
            problem.mean_upper_value(&x, &y)
        })
        .sum::<f64>()
        / n as f64
}

pub fn probe<P: BilevelProblem>(problem: &P, state: &SwarmState, alpha: f64) -> Result<Probe> {
    let x_bar = state.mean_x();
    let phi_gap = match problem.phi_star() {
        Some(star) => Some(phi_value(problem, &x_bar)? - star),
        None => None,
    };
    let probe = Probe {
        t: state.t,
        grad_sq_norm: hypergrad_sq_norm(problem, state)?,
        phi_gap,
        consensus_error: consensus_error(state),
        upper_loss: upper_loss(problem, state),
        alpha,
    };
    if !probe.is_finite() {
        return Err(Error::NumericalDivergence { iteration: state.t });
    }
    Ok(probe)
}

/// Curve used to compare a decentralized run against its centralized reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransientMetric {
    GradSqNorm,
    PhiGap,
    ConsensusError,
    #[default]
    UpperLoss,
    /// `upper_loss - Phi*`.
    ExcessLoss,
}

impl TransientMetric {
    pub fn label(self) -> &'static str {
        match self {
            TransientMetric::GradSqNorm => "grad_sq_norm",
            TransientMetric::PhiGap => "phi_gap",
            TransientMetric::ConsensusError => "consensus_error",
            TransientMetric::UpperLoss => "upper_loss",
            TransientMetric::ExcessLoss => "excess_loss",
        }
    }

    pub fn series(self, record: &RunRecord) -> Result<Vec<f64>> {
        let missing = |what: &str| Error::Validation { key: "metric".into(), message: format!("record has no {what}") };
        record
            .probes
            .iter()
            .map(|p| match self {
                TransientMetric::GradSqNorm => Ok(p.grad_sq_norm),
                TransientMetric::PhiGap => p.phi_gap.ok_or_else(|| missing("phi_gap")),
                TransientMetric::ConsensusError => Ok(p.consensus_error),
                TransientMetric::UpperLoss => Ok(p.upper_loss),
                TransientMetric::ExcessLoss => record.metadata.phi_star.map(|s| p.upper_loss - s).ok_or_else(|| missing("phi_star")),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransientEstimate {
    /// First probe from which the decentralized curve stays within tolerance;
    /// one past the last probe when it never does.
    pub cutoff_iteration: usize,
    pub rel_tol: f64,
    pub window: usize,
    pub matched: bool,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

/// Median over the trailing `window` entries (fewer at the start).
pub fn trailing_median(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let start = (i + 1).saturating_sub(window);
            median(&mut values[start..=i].to_vec())
        })
        .collect()
}

pub fn transient_cutoff(
    decentralized: &RunRecord,
    centralized: &RunRecord,
    rel_tol: f64,
    window: usize,
    metric: TransientMetric,
) -> Result<TransientEstimate> {
    if window == 0 {
        return Err(Error::Validation { key: "window".into(), message: "must be at least 1".into() });
    }
    if !(rel_tol >= 0.0) {
        return Err(Error::Validation { key: "rel_tol".into(), message: "must be non-negative".into() });
    }
    let grid = decentralized.grid();
    if grid != centralized.grid() {
        return Err(Error::GridMismatch);
    }
    if grid.is_empty() {
        return Err(Error::EmptyInput);
    }
    let dec = trailing_median(&metric.series(decentralized)?, window);
    let cen = trailing_median(&metric.series(centralized)?, window);
    let first_ok = dec
        .iter()
        .zip(&cen)
        .rposition(|(d, c)| *d > (1.0 + rel_tol) * c)
        .map_or(0, |k| k + 1);
    let matched = first_ok < grid.len();
    let cutoff_iteration = if matched { grid[first_ok] } else { grid[grid.len() - 1] + 1 };
    Ok(TransientEstimate { cutoff_iteration, rel_tol, window, matched })
}

/// Mean and standard error across records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub t: usize,
    pub records: usize,
    pub grad_sq_norm: Stat,
    pub phi_gap: Option<Stat>,
    pub consensus_error: Stat,
    pub upper_loss: Stat,
    pub alpha: Stat,
}

fn stat(mut values: Vec<f64>) -> Stat {
    // fixed summation order makes the result independent of record order
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    if values.first() == values.last() {
        return Stat { mean: values[0], stderr: 0.0 };
    }
    let (mean, stderr) = mean_and_stderr(&values);
    Stat { mean, stderr }
}

/// Per-probe mean and standard error over records of one configuration.
pub fn summarize(records: &[RunRecord]) -> Result<Vec<SummaryRow>> {
    let first = records.first().ok_or(Error::EmptyInput)?;
    let grid = first.grid();
    if records.iter().any(|r| r.grid() != grid) {
        return Err(Error::GridMismatch);
    }
    Ok(grid
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let column = |f: &dyn Fn(&Probe) -> f64| stat(records.iter().map(|r| f(&r.probes[k])).collect());
            let gaps: Option<Vec<f64>> = records.iter().map(|r| r.probes[k].phi_gap).collect();
            SummaryRow {
                t,
                records: records.len(),
                grad_sq_norm: column(&|p| p.grad_sq_norm),
                phi_gap: gaps.map(stat),
                consensus_error: column(&|p| p.consensus_error),
                upper_loss: column(&|p| p.upper_loss),
                alpha: column(&|p| p.alpha),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{init, HyperParams, StreamMode};
    use crate::problem::QuadraticProblem;
    use crate::topology::{build_topology, TopologyKind};
    use nalgebra::DMatrix;

    fn record(values: &[f64]) -> RunRecord {
        RunRecord {
            metadata: RunMetadata {
                config_hash: String::new(),
                problem_seed: None,
                run_seed: 0,
                topology: "test".into(),
                variant: Variant::So,
                n: 1,
                d: 1,
                p: 1,
                phi_star: Some(0.5),
            },
            probes: values
                .iter()
                .enumerate()
                .map(|(k, &v)| Probe { t: 10 * k, grad_sq_norm: v, phi_gap: Some(v), consensus_error: v, upper_loss: v, alpha: 0.1 })
                .collect(),
        }
    }

    fn state(n: usize, d: usize) -> SwarmState {
        let p = QuadraticProblem::trivial(n, d);
        let w = build_topology(&TopologyKind::FullyConnected, n).unwrap();
        init(&p, &w, &HyperParams::default(), 0, StreamMode::PerNode).unwrap()
    }

    #[test]
    fn consensus_error_by_hand() {
        let mut s = state(2, 1);
        assert_eq!(consensus_error(&s), 0.0);
        s.x = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        assert_eq!(consensus_error(&s), 1.0);
    }

    #[test]
    fn hypergradient_on_trivial_instance() {
        let p = QuadraticProblem::trivial(2, 2);
        let mut s = state(2, 2);
        assert_eq!(hypergrad_sq_norm(&p, &s).unwrap(), 0.0);
        s.x = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 2.0, 0.0]);
        assert!((hypergrad_sq_norm(&p, &s).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn identical_records_cut_at_first_probe() {
        let r = record(&[5.0, 4.0, 3.0, 2.0]);
        let est = transient_cutoff(&r, &r, 0.0, 1, TransientMetric::UpperLoss).unwrap();
        assert!(est.matched);
        assert_eq!(est.cutoff_iteration, 0);
    }

    #[test]
    fn never_matching_records() {
        let cen = record(&[1.0, 1.0, 1.0]);
        let dec = record(&[2.0, 2.0, 2.0]);
        let est = transient_cutoff(&dec, &cen, 0.1, 5, TransientMetric::GradSqNorm).unwrap();
        assert!(!est.matched);
        assert_eq!(est.cutoff_iteration, 21);
    }

    #[test]
    fn cutoff_after_last_violation() {
        let cen = record(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let dec = record(&[3.0, 1.0, 1.0, 3.0, 1.0, 1.0]);
        let est = transient_cutoff(&dec, &cen, 0.5, 1, TransientMetric::ConsensusError).unwrap();
        assert_eq!(est.cutoff_iteration, 40);
        // medians over 3: [3, 2, 1, 1, 1, 1]
        let smoothed = transient_cutoff(&dec, &cen, 0.5, 3, TransientMetric::ConsensusError).unwrap();
        assert_eq!(smoothed.cutoff_iteration, 20);
    }

    #[test]
    fn excess_loss_uses_phi_star() {
        let r = record(&[1.0, 2.0]);
        assert_eq!(TransientMetric::ExcessLoss.series(&r).unwrap(), vec![0.5, 1.5]);
        let mut none = r.clone();
        none.metadata.phi_star = None;
        assert!(TransientMetric::ExcessLoss.series(&none).is_err());
    }

    #[test]
    fn grid_mismatch() {
        let a = record(&[1.0, 2.0]);
        let b = record(&[1.0, 2.0, 3.0]);
        assert_eq!(transient_cutoff(&a, &b, 0.1, 5, TransientMetric::UpperLoss).unwrap_err(), Error::GridMismatch);
        assert_eq!(summarize(&[a, b]).unwrap_err(), Error::GridMismatch);
    }

    #[test]
    fn trailing_median_values() {
        assert_eq!(trailing_median(&[1.0, 9.0, 2.0, 8.0], 3), vec![1.0, 5.0, 2.0, 8.0]);
    }

    #[test]
    fn summarize_single_and_duplicates() {
        assert_eq!(summarize(&[]).unwrap_err(), Error::EmptyInput);
        let r = record(&[1.0, 2.0, 3.0]);
        for k in [1, 3, 4] {
            let rows = summarize(&vec![r.clone(); k]).unwrap();
            assert_eq!(rows.len(), 3);
            for (row, probe) in rows.iter().zip(&r.probes) {
                assert_eq!(row.upper_loss.mean, probe.upper_loss);
                assert_eq!(row.upper_loss.stderr, 0.0);
                assert_eq!(row.phi_gap.unwrap().mean, probe.phi_gap.unwrap());
            }
        }
    }
}
