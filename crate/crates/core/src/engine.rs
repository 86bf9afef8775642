//! Synchronous single-loop iterations over a gossip network.
//!
//! Every node keeps `(x_i, y_i, z_i, h_i)`. One iteration reads only the
//! iteration-`t` snapshot: each node draws one upper and one lower sample from
//! its own stream, forms its local directions, takes local steps on `x, y, z`,
//! and the results are averaged with its neighbours through `W`. The moving
//! average `h_i` stays local:
//!
//! ```text
//! x_i <- sum_j w_ij (x_j - tau alpha h_j)
//! y_i <- sum_j w_ij (y_j - beta d_y,j)
//! z_i <- sum_j w_ij (z_j - gamma d_z,j)
//! h_i <- (1 - theta) h_i + theta d_x,i
//! ```
//!
//! The centralized variant applies the same local computation and replaces
//! the gossip round with an exact network average of every variable.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, RunMetadata, RunRecord};
use crate::oracles::{directions_stochastic, HvpMode};
use crate::problem::BilevelProblem;
use crate::topology::MixingMatrix;

/// Sup-norm beyond which a run is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

/// Per-node random stream.
pub type NodeStream = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Sampled Hessian/Jacobian-vector products.
    So,
    /// Central-difference products from sampled gradients.
    Fo,
    /// Exact averaging after every step (second-order products).
    Centralized,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::So => "so",
            Variant::Fo => "fo",
            Variant::Centralized => "centralized",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Multiply all step sizes by `factor` every `period` iterations.
    StageDecay { factor: f64, period: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeltaSchedule {
    Fixed { delta: f64 },
    /// `delta_i = min(max, sqrt(3) iota / (l_hess_g ||z_i||^2))`, which keeps
    /// the finite-difference bias of each product below `iota`.
    Adaptive { max: f64, iota: f64, l_hess_g: f64 },
}

impl DeltaSchedule {
    pub fn delta_for(&self, z: &DVector<f64>) -> f64 {
        match *self {
            DeltaSchedule::Fixed { delta } => delta,
            DeltaSchedule::Adaptive { max, iota, l_hess_g } => {
                let zz = z.norm_squared();
                if zz == 0.0 || l_hess_g == 0.0 {
                    max
                } else {
                    max.min(3f64.sqrt() * iota / (l_hess_g * zz))
                }
            }
        }
    }
}

/// Step sizes `beta = c1 alpha`, `gamma = c2 alpha`, `theta = c3 alpha`
/// unless `theta` is pinned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub variant: Variant,
    pub alpha0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// Fixed moving-average weight; when `None`, `theta_t = c3 alpha_t`.
    pub theta: Option<f64>,
    /// Extra scaling on the `x` step.
    pub tau: f64,
    pub schedule: Schedule,
    pub delta: DeltaSchedule,
    /// Optional radius for `||z_i||` (off by default).
    pub z_clamp: Option<f64>,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            variant: Variant::So,
            alpha0: 0.1,
            c1: 1.0,
            c2: 1.0,
            c3: 2.0,
            theta: None,
            tau: 1.0,
            schedule: Schedule::Constant,
            delta: DeltaSchedule::Fixed { delta: 1e-3 },
            z_clamp: None,
        }
    }
}

/// Step sizes in effect at one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
}

fn invalid(key: &str, message: impl Into<String>) -> Error {
    Error::Validation { key: key.into(), message: message.into() }
}

impl HyperParams {
    /// Settings of the streaming ridge-tuning experiment: all step sizes start
    /// at 0.1 and decay by 0.8 every 1000 iterations, theta fixed at 0.2.
    pub fn ridge_experiment(variant: Variant) -> Self {
        HyperParams {
            variant,
            alpha0: 0.1,
            theta: Some(0.2),
            schedule: Schedule::StageDecay { factor: 0.8, period: 1000 },
            ..HyperParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 >= 0.0) || !self.alpha0.is_finite() {
            return Err(invalid("alpha", "must be finite and non-negative"));
        }
        for (key, c) in [("c1", self.c1), ("c2", self.c2), ("c3", self.c3), ("tau", self.tau)] {
            if !(c > 0.0) || !c.is_finite() {
                return Err(invalid(key, "must be finite and positive"));
            }
        }
        if let Some(theta) = self.theta {
            if !(0.0..=1.0).contains(&theta) {
                return Err(invalid("theta", "must lie in [0, 1]"));
            }
        }
        if let Schedule::StageDecay { factor, period } = self.schedule {
            if !(factor > 0.0 && factor <= 1.0) {
                return Err(invalid("decay_factor", "must lie in (0, 1]"));
            }
            if period == 0 {
                return Err(invalid("decay_period", "must be at least 1"));
            }
        }
        match self.delta {
            DeltaSchedule::Fixed { delta } if !(delta > 0.0) => return Err(invalid("delta", "must be positive")),
            DeltaSchedule::Adaptive { max, iota, l_hess_g } if !(max > 0.0 && iota > 0.0 && l_hess_g >= 0.0) => {
                return Err(invalid("delta", "adaptive bounds must be positive"))
            }
            _ => {}
        }
        if let Some(r) = self.z_clamp {
            if !(r > 0.0) {
                return Err(invalid("z_clamp", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn step_sizes(&self, t: usize) -> StepSizes {
        let alpha = match self.schedule {
            Schedule::Constant => self.alpha0,
            Schedule::StageDecay { factor, period } => self.alpha0 * factor.powi((t / period) as i32),
        };
        StepSizes {
            alpha,
            beta: self.c1 * alpha,
            gamma: self.c2 * alpha,
            theta: self.theta.unwrap_or((self.c3 * alpha).min(1.0)),
        }
    }

    fn hvp_mode(&self, z: &DVector<f64>) -> HvpMode {
        match self.variant {
            Variant::Fo => HvpMode::FiniteDifference { delta: self.delta.delta_for(z) },
            Variant::So | Variant::Centralized => HvpMode::SecondOrder,
        }
    }
}

/// Iterates of every node plus their random streams.
#[derive(Debug, Clone, PartialEq)]
pub struct SwarmState {
    pub t: usize,
    /// `n x d`, row `i` is `x_i`.
    pub x: DMatrix<f64>,
    /// `n x p`.
    pub y: DMatrix<f64>,
    /// `n x p`.
    pub z: DMatrix<f64>,
    /// `n x d` moving-average hypergradient estimates.
    pub h: DMatrix<f64>,
    pub streams: Vec<NodeStream>,
}

impl SwarmState {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn mean_x(&self) -> DVector<f64> {
        column_means(&self.x)
    }

    pub fn mean_y(&self) -> DVector<f64> {
        column_means(&self.y)
    }

    fn sup_norm(&self) -> f64 {
        [&self.x, &self.y, &self.z, &self.h]
            .iter()
            .flat_map(|m| m.iter())
            .fold(0.0f64, |acc, v| if v.is_finite() { acc.max(v.abs()) } else { f64::INFINITY })
    }
}

pub(crate) fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_fn(m.ncols(), |c, _| m.column(c).sum() / n)
}

fn replicate(mean: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, mean.len(), |_, c| mean[c])
}

/// How per-node streams are derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// Node `i` uses ChaCha stream `i` of the run seed.
    #[default]
    PerNode,
    /// Every node replays stream 0, so nodes with identical data draw
    /// identical samples.
    Shared,
}

pub fn node_streams(seed: u64, n: usize, mode: StreamMode) -> Vec<NodeStream> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(match mode {
                StreamMode::PerNode => i as u64,
                StreamMode::Shared => 0,
            });
            rng
        })
        .collect()
}

/// Zero iterates and fresh streams.
pub fn init<P: BilevelProblem>(problem: &P, w: &MixingMatrix, hyper: &HyperParams, seed: u64, mode: StreamMode) -> Result<SwarmState> {
    hyper.validate()?;
    let n = problem.n_nodes();
    if w.n() != n {
        return Err(Error::ConfigMismatch(format!("problem has {n} nodes, mixing matrix has {}", w.n())));
    }
    let (d, p) = (problem.dim_x(), problem.dim_y());
    Ok(SwarmState {
        t: 0,
        x: DMatrix::zeros(n, d),
        y: DMatrix::zeros(n, p),
        z: DMatrix::zeros(n, p),
        h: DMatrix::zeros(n, d),
        streams: node_streams(seed, n, mode),
    })
}

/// One synchronous iteration.
pub fn step<P: BilevelProblem>(problem: &P, w: &MixingMatrix, hyper: &HyperParams, state: &mut SwarmState) -> Result<()> {
    let n = state.n();
    if w.n() != n || problem.n_nodes() != n {
        return Err(Error::ConfigMismatch(format!("state has {n} nodes")));
    }
    let sizes = hyper.step_sizes(state.t);
    let step_x = hyper.tau * sizes.alpha;
    let mut x_next = state.x.clone();
    let mut y_next = state.y.clone();
    let mut z_next = state.z.clone();
    let mut h_next = state.h.clone();

    for j in 0..n {
        let x = state.x.row(j).transpose();
        let y = state.y.row(j).transpose();
        let z = state.z.row(j).transpose();
        let h = state.h.row(j).transpose();
        let stream = &mut state.streams[j];
        let upper = problem.sample_upper(j, stream);
        let lower = problem.sample_lower(j, stream);
        let dirs = directions_stochastic(problem, j, &x, &y, &z, hyper.hvp_mode(&z), &upper, &lower)?;

        x_next.set_row(j, &(&x - &h * step_x).transpose());
        y_next.set_row(j, &(&y - &dirs.d_y * sizes.beta).transpose());
        z_next.set_row(j, &(&z - &dirs.d_z * sizes.gamma).transpose());
        h_next.set_row(j, &(&h * (1.0 - sizes.theta) + &dirs.d_x * sizes.theta).transpose());
    }

    match hyper.variant {
        Variant::Centralized => {
            state.x = replicate(&column_means(&x_next), n);
            state.y = replicate(&column_means(&y_next), n);
            state.z = replicate(&column_means(&z_next), n);
            state.h = replicate(&column_means(&h_next), n);
        }
        Variant::So | Variant::Fo => {
            state.x = w.mix(&x_next)?;
            state.y = w.mix(&y_next)?;
            state.z = w.mix(&z_next)?;
            state.h = h_next;
        }
    }
    if let Some(radius) = hyper.z_clamp {
        for mut row in state.z.row_iter_mut() {
            let norm = row.norm();
            if norm > radius {
                row *= radius / norm;
            }
        }
    }
    state.t += 1;
    if state.sup_norm() > DIVERGENCE_THRESHOLD {
        return Err(Error::NumericalDivergence { iteration: state.t });
    }
    Ok(())
}

/// Starting `(X, Y, Z, H)`, one row per node.
pub type InitialState = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>);

/// Run-level options.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub iterations: usize,
    pub probe_every: usize,
    pub seed: u64,
    pub streams: StreamMode,
    pub deadline: Option<Instant>,
    /// Replaces the zero initialization (streams are still derived from `seed`).
    pub initial: Option<InitialState>,
}

impl RunOptions {
    pub fn new(iterations: usize, probe_every: usize, seed: u64) -> Self {
        RunOptions { iterations, probe_every, seed, streams: StreamMode::PerNode, deadline: None, initial: None }
    }

    /// Probe iterations: `0, k, 2k, ...` and the final iteration.
    pub fn probe_grid(&self) -> Vec<usize> {
        let k = self.probe_every.max(1);
        let mut grid: Vec<usize> = (0..=self.iterations).step_by(k).collect();
        if grid.last() != Some(&self.iterations) {
            grid.push(self.iterations);
        }
        grid
    }
}

/// Runs `iterations` steps, probing metrics on the grid. On failure the probes
/// collected so far are returned together with the error.
pub fn run_partial<P: BilevelProblem>(
    problem: &P,
    w: &MixingMatrix,
    hyper: &HyperParams,
    options: &RunOptions,
) -> (RunRecord, Option<Error>) {
    let metadata = RunMetadata {
        config_hash: String::new(),
        problem_seed: None,
        run_seed: options.seed,
        topology: match hyper.variant {
            Variant::Centralized => "centralized".into(),
            _ => w.label().to_string(),
        },
        variant: hyper.variant,
        n: problem.n_nodes(),
        d: problem.dim_x(),
        p: problem.dim_y(),
        phi_star: problem.phi_star(),
    };
    let mut record = RunRecord { metadata, probes: Vec::new() };
    let mut state = match init(problem, w, hyper, options.seed, options.streams) {
        Ok(s) => s,
        Err(e) => return (record, Some(e)),
    };
    if let Some((x, y, z, h)) = &options.initial {
        let shapes = [(x, state.x.shape()), (y, state.y.shape()), (z, state.z.shape()), (h, state.h.shape())];
        if let Some((m, expected)) = shapes.iter().find(|(m, s)| m.shape() != *s) {
            return (record, Some(Error::ConfigMismatch(format!("initial block {:?} expected {:?}", m.shape(), expected))));
        }
        state.x = x.clone();
        state.y = y.clone();
        state.z = z.clone();
        state.h = h.clone();
    }
    if options.iterations == 0 && options.probe_every == 0 {
        return (record, Some(invalid("probe_every", "must be at least 1")));
    }
    let grid = options.probe_grid();
    let mut next_probe = 0;
    loop {
        if grid.get(next_probe) == Some(&state.t) {
            match metrics::probe(problem, &state, hyper.step_sizes(state.t).alpha) {
                Ok(p) => record.probes.push(p),
                Err(e) => return (record, Some(e)),
            }
            next_probe += 1;
        }
        if state.t == options.iterations {
            return (record, None);
        }
        if let Some(deadline) = options.deadline {
            if Instant::now() > deadline {
                return (record, Some(Error::TimeLimit { iteration: state.t }));
            }
        }
        if let Err(e) = step(problem, w, hyper, &mut state) {
            return (record, Some(e));
        }
    }
}

/// Same as [`run_partial`] but fails on any error.
pub fn run<P: BilevelProblem>(problem: &P, w: &MixingMatrix, hyper: &HyperParams, options: &RunOptions) -> Result<RunRecord> {
    match run_partial(problem, w, hyper, options) {
        (record, None) => Ok(record),
        (_, Some(e)) => Err(e),
    }
}
