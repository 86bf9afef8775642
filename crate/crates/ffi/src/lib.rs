//! C interface to the dsoba simulator.
//!
//! Objects are exposed as opaque handles created by `*_new` functions and
//! released with the matching `*_free`. Every fallible call returns a
//! [`DsobaStatus`]; the message of the most recent failure on the calling
//! thread is available from [`dsoba_last_error_message`].
//!
//! Matrices cross the boundary as row-major `double` buffers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dsoba::cli::write_run_csv;
use dsoba::engine::{run_partial, DeltaSchedule, HyperParams, RunOptions, Schedule, StreamMode, Variant};
use dsoba::metrics::{transient_cutoff, RunRecord, TransientMetric};
use dsoba::problem::{
    hypergradient_exact, make_logcosh, make_quadratic, make_ridge_tuning, BilevelProblem, LogCoshProblem, QuadraticProblem,
    QuadraticSpec, RidgeTuningProblem, RidgeTuningSpec,
};
use dsoba::topology::{build_topology, MixingMatrix, TopologyKind};
use dsoba::Error;
use nalgebra::{DMatrix, DVector};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsobaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    IncompatibleSize = 3,
    NonStochasticWeights = 4,
    DimensionMismatch = 5,
    ConfigMismatch = 6,
    NumericalDivergence = 7,
    TimeLimit = 8,
    SolveFailed = 9,
    GridMismatch = 10,
    EmptyInput = 11,
    Io = 12,
    Panic = 13,
}

impl From<&Error> for DsobaStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::IncompatibleSize(_) => DsobaStatus::IncompatibleSize,
            Error::NonStochasticWeights(_) => DsobaStatus::NonStochasticWeights,
            Error::DimensionMismatch { .. } => DsobaStatus::DimensionMismatch,
            Error::ConfigMismatch(_) => DsobaStatus::ConfigMismatch,
            Error::NumericalDivergence { .. } => DsobaStatus::NumericalDivergence,
            Error::TimeLimit { .. } => DsobaStatus::TimeLimit,
            Error::LowerSolveDiverged { .. } | Error::SingularHessian => DsobaStatus::SolveFailed,
            Error::GridMismatch => DsobaStatus::GridMismatch,
            Error::EmptyInput => DsobaStatus::EmptyInput,
            Error::Io(_) => DsobaStatus::Io,
            Error::SpectralGapDegenerate { .. }
            | Error::DegenerateDelta(_)
            | Error::Parse(_)
            | Error::Validation { .. } => DsobaStatus::InvalidArgument,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn fail(status: DsobaStatus, message: &str) -> DsobaStatus {
    set_error(message);
    status
}

fn from_error(e: &Error) -> DsobaStatus {
    fail(e.into(), &e.to_string())
}

fn guard(f: impl FnOnce() -> DsobaStatus) -> DsobaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == DsobaStatus::Ok {
                set_error("");
            }
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(DsobaStatus::Panic, &message)
        }
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(DsobaStatus::NullPointer, concat!("`", stringify!($p), "` is null"));
        })+
    };
}

/// Message of the last failed call on this thread (empty after a success).
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn dsoba_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dsoba_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---------------------------------------------------------------- topology

/// Opaque mixing matrix.
pub struct DsobaTopology {
    inner: MixingMatrix,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsobaTopologyKind {
    FullyConnected = 0,
    /// Uses `self_weight` and `neighbor_weight`.
    Ring = 1,
    AdjustedRing = 2,
    /// Uses `rows` and `cols`.
    Torus = 3,
    ExponentialGraph = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DsobaTopologySpec {
    pub kind: DsobaTopologyKind,
    pub n: usize,
    pub self_weight: f64,
    pub neighbor_weight: f64,
    pub rows: usize,
    pub cols: usize,
}

/// Builds a named graph family.
///
/// # Safety
/// `spec` must point to a valid spec and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn dsoba_topology_new(spec: *const DsobaTopologySpec, out: *mut *mut DsobaTopology) -> DsobaStatus {
    guard(|| {
        non_null!(spec, out);
        let spec = &*spec;
        let kind = match spec.kind {
            DsobaTopologyKind::FullyConnected => TopologyKind::FullyConnected,
            DsobaTopologyKind::Ring => TopologyKind::Ring { self_weight: spec.self_weight, neighbor_weight: spec.neighbor_weight },
            DsobaTopologyKind::AdjustedRing => TopologyKind::AdjustedRing,
            DsobaTopologyKind::Torus => TopologyKind::Torus2D { rows: spec.rows, cols: spec.cols },
            DsobaTopologyKind::ExponentialGraph => TopologyKind::ExponentialGraph,
        };
        match build_topology(&kind, spec.n) {
            Ok(w) => {
                *out = Box::into_raw(Box::new(DsobaTopology { inner: w }));
                DsobaStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Validates an explicit `n x n` row-major weight matrix.
///
/// # Safety
/// `weights` must hold `n * n` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dsoba_topology_from_weights(n: usize, weights: *const f64, out: *mut *mut DsobaTopology) -> DsobaStatus {
    guard(|| {
        non_null!(weights, out);
        let Some(len) = n.checked_mul(n) else {
            return fail(DsobaStatus::InvalidArgument, "n is too large");
        };
        let data = std::slice::from_raw_parts(weights, len);
        match MixingMatrix::from_weights(DMatrix::from_row_slice(n, n, data)) {
            Ok(w) => {
                *out = Box::into_raw(Box::new(DsobaTopology { inner: w }));
                DsobaStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// # Safety
/// `topology` must come from a constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dsoba_topology_free(topology: *mut DsobaTopology) {
    if !topology.is_null() {
        drop(Box::from_raw(topology));
    }
}

/// Node count; 0 for a null handle.
///
/// # Safety
/// `topology` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dsoba_topology_n(topology: *const DsobaTopology) -> usize {
    topology.as_ref().map_or(0, |t| t.inner.n())
}

/// `||W - 11'/n||_2`.
///
/// # Safety
/// `topology` must be a live handle and `rho` writable.
#[no_mangle]
pub unsafe extern "C" fn dsoba_topology_rho(topology: *const DsobaTopology, rho: *mut f64) -> DsobaStatus {
    guard(|| {
        non_null!(topology, rho);
        *rho = (*topology).inner.rho();
        DsobaStatus::Ok
    })
}

/// Copies the weights row-major into `buffer` of length `len >= n * n`.
///
/// # Safety
/// `buffer` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn dsoba_topology_weights(topology: *const DsobaTopology, buffer: *mut f64, len: usize) -> DsobaStatus {
    guard(|| {
        non_null!(topology, buffer);
        let w = (*topology).inner.weights();
        let n = w.nrows();
        if len < n * n {
            return fail(DsobaStatus::DimensionMismatch, "buffer is shorter than n * n");
        }
        let out = std::slice::from_raw_parts_mut(buffer, n * n);
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = w[(i, j)];
            }
        }
        DsobaStatus::Ok
    })
}

// ----------------------------------------------------------------- problem

enum ProblemInner {
    Quadratic(QuadraticProblem),
    Ridge(RidgeTuningProblem),
    Logcosh(LogCoshProblem),
}

macro_rules! with_problem {
    ($inner:expr, $p:ident => $body:expr) => {
        match $inner {
            ProblemInner::Quadratic($p) => $body,
            ProblemInner::Ridge($p) => $body,
            ProblemInner::Logcosh($p) => $body,
        }
    };
}

/// Opaque synthetic problem instance.
pub struct DsobaProblem {
    inner: ProblemInner,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DsobaQuadraticSpec {
    pub n_nodes: usize,
    pub dim_x: usize,
    pub dim_y: usize,
    pub conditioning: f64,
    pub heterogeneity: f64,
    pub noise: f64,
}

fn check_quadratic(spec: &DsobaQuadraticSpec) -> Option<&'static str> {
    if spec.n_nodes == 0 || spec.dim_x == 0 || spec.dim_y == 0 {
        Some("sizes must be positive")
    } else if !(spec.conditioning >= 1.0) {
        Some("conditioning must be at least 1")
    } else if !(spec.heterogeneity >= 0.0 && spec.noise >= 0.0) {
        Some("heterogeneity and noise must be non-negative")
    } else {
        None
    }
}

fn quadratic_spec(spec: &DsobaQuadraticSpec) -> QuadraticSpec {
    QuadraticSpec {
        n_nodes: spec.n_nodes,
        dim_x: spec.dim_x,
        dim_y: spec.dim_y,
        conditioning: spec.conditioning,
        heterogeneity: spec.heterogeneity,
        noise: spec.noise,
    }
}

unsafe fn emit_problem(out: *mut *mut DsobaProblem, inner: ProblemInner) -> DsobaStatus {
    *out = Box::into_raw(Box::new(DsobaProblem { inner }));
    DsobaStatus::Ok
}

/// Random quadratic bilevel instance.
///
/// # Safety
/// `spec` must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dsoba_problem_quadratic_new(seed: u64, spec: *const DsobaQuadraticSpec, out: *mut *mut DsobaProblem) -> DsobaStatus {
    guard(|| {
        non_null!(spec, out);
        if let Some(msg) = check_quadratic(&*spec) {
            return fail(DsobaStatus::InvalidArgument, msg);
        }
        emit_problem(out, ProblemInner::Quadratic(make_quadratic(seed, &quadratic_spec(&*spec))))
    })
}

/// Quadratic instance with an extra `weight * log cosh` lower-level term.
///
/// # Safety
/// `spec` must be valid and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dsoba_problem_logcosh_new(
    seed: u64,
    spec: *const DsobaQuadraticSpec,
    weight: f64,
    out: *mut *mut DsobaProblem,
) -> DsobaStatus {
    guard(|| {
        non_null!(spec, out);
        if let Some(msg) = check_quadratic(&*spec) {
            return fail(DsobaStatus::InvalidArgument, msg);
        }
        if !(weight >= 0.0) {
            return fail(DsobaStatus::InvalidArgument, "weight must be non-negative");
        }
        emit_problem(out, ProblemInner::Logcosh(make_logcosh(seed, &quadratic_spec(&*spec), weight)))
    })
}

/// Streaming ridge-parameter tuning instance.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dsoba_problem_ridge_new(
    seed: u64,
    n_nodes: usize,
    dim: usize,
    heterogeneity: f64,
    out: *mut *mut DsobaProblem,
) -> DsobaStatus {
    guard(|| {
        non_null!(out);
        if n_nodes == 0 || dim == 0 || !(heterogeneity >= 0.0) {
            return fail(DsobaStatus::InvalidArgument, "sizes must be positive and heterogeneity non-negative");
        }
        emit_problem(out, ProblemInner::Ridge(make_ridge_tuning(seed, &RidgeTuningSpec { dim, heterogeneity }, n_nodes)))
    })
}

/// # Safety
/// `problem` must come from a constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dsoba_problem_free(problem: *mut DsobaProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Node count and dimensions of `x` and `y`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dsoba_problem_dims(problem: *const DsobaProblem, n_nodes: *mut usize, dim_x: *mut usize, dim_y: *mut usize) -> DsobaStatus {
    guard(|| {
        non_null!(problem, n_nodes, dim_x, dim_y);
        with_problem!(&(*problem).inner, p => {
            *n_nodes = p.n_nodes();
            *dim_x = p.dim_x();
            *dim_y = p.dim_y();
        });
        DsobaStatus::Ok
    })
}

/// Exact `grad Phi(x)` written into `grad` (length `dim_x`).
///
/// # Safety
/// `x` and `grad` must each hold `dim_x` doubles.
#[no_mangle]
pub unsafe extern "C" fn dsoba_problem_hypergradient(problem: *const DsobaProblem, x: *const f64, dim_x: usize, grad: *mut f64) -> DsobaStatus {
    guard(|| {
        non_null!(problem, x, grad);
        let x = DVector::from_column_slice(std::slice::from_raw_parts(x, dim_x));
        let result = with_problem!(&(*problem).inner, p => hypergradient_exact(p, &x));
        match result {
            Ok(g) => {
                std::slice::from_raw_parts_mut(grad, dim_x).copy_from_slice(g.as_slice());
                DsobaStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

// --------------------------------------------------------------------- run

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsobaVariant {
    So = 0,
    Fo = 1,
    Centralized = 2,
}

/// Step-size settings. `theta < 0` means `theta_t = c3 * alpha_t`;
/// `decay_period == 0` means constant steps.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DsobaHyperParams {
    pub variant: DsobaVariant,
    pub alpha0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub theta: f64,
    pub tau: f64,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub delta: f64,
}

/// Defaults for `variant`.
#[no_mangle]
pub extern "C" fn dsoba_hyper_default(variant: DsobaVariant) -> DsobaHyperParams {
    let h = HyperParams::default();
    let DeltaSchedule::Fixed { delta } = h.delta else { unreachable!() };
    DsobaHyperParams {
        variant,
        alpha0: h.alpha0,
        c1: h.c1,
        c2: h.c2,
        c3: h.c3,
        theta: h.theta.unwrap_or(-1.0),
        tau: h.tau,
        decay_factor: 1.0,
        decay_period: 0,
        delta,
    }
}

fn hyper_from_c(h: &DsobaHyperParams) -> HyperParams {
    HyperParams {
        variant: match h.variant {
            DsobaVariant::So => Variant::So,
            DsobaVariant::Fo => Variant::Fo,
            DsobaVariant::Centralized => Variant::Centralized,
        },
        alpha0: h.alpha0,
        c1: h.c1,
        c2: h.c2,
        c3: h.c3,
        theta: (h.theta >= 0.0).then_some(h.theta),
        tau: h.tau,
        schedule: if h.decay_period == 0 {
            Schedule::Constant
        } else {
            Schedule::StageDecay { factor: h.decay_factor, period: h.decay_period }
        },
        delta: DeltaSchedule::Fixed { delta: h.delta },
        z_clamp: None,
    }
}

/// Opaque metrics trajectory.
pub struct DsobaRecord {
    inner: RunRecord,
}

/// Runs `iterations` steps from the zero state, probing every `probe_every`
/// iterations and at the end. `shared_streams` makes every node replay the
/// same random stream.
///
/// On divergence or solver failure the status is non-zero and `out` still
/// receives the probes recorded so far.
///
/// # Safety
/// Handles must be live; `hyper` valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dsoba_run(
    problem: *const DsobaProblem,
    topology: *const DsobaTopology,
    hyper: *const DsobaHyperParams,
    iterations: usize,
    probe_every: usize,
    seed: u64,
    shared_streams: bool,
    out: *mut *mut DsobaRecord,
) -> DsobaStatus {
    guard(|| {
        non_null!(problem, topology, hyper, out);
        if probe_every == 0 {
            return fail(DsobaStatus::InvalidArgument, "probe_every must be at least 1");
        }
        let hyper = hyper_from_c(&*hyper);
        let mut options = RunOptions::new(iterations, probe_every, seed);
        options.streams = if shared_streams { StreamMode::Shared } else { StreamMode::PerNode };
        let w = &(*topology).inner;
        let (record, error) = with_problem!(&(*problem).inner, p => run_partial(p, w, &hyper, &options));
        if let Some(Error::Validation { .. } | Error::ConfigMismatch(_)) = &error {
            return from_error(error.as_ref().unwrap());
        }
        *out = Box::into_raw(Box::new(DsobaRecord { inner: record }));
        match error {
            None => DsobaStatus::Ok,
            Some(e) => from_error(&e),
        }
    })
}

/// # Safety
/// `record` must come from [`dsoba_run`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dsoba_record_free(record: *mut DsobaRecord) {
    if !record.is_null() {
        drop(Box::from_raw(record));
    }
}

/// Number of probes; 0 for a null handle.
///
/// # Safety
/// `record` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dsoba_record_len(record: *const DsobaRecord) -> usize {
    record.as_ref().map_or(0, |r| r.inner.probes.len())
}

/// One probe. `phi_gap` is NaN when the optimal value is unknown.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DsobaProbe {
    pub t: u64,
    pub grad_sq_norm: f64,
    pub phi_gap: f64,
    pub consensus_error: f64,
    pub upper_loss: f64,
    pub alpha: f64,
}

/// # Safety
/// `record` must be live and `probe` writable.
#[no_mangle]
pub unsafe extern "C" fn dsoba_record_probe(record: *const DsobaRecord, index: usize, probe: *mut DsobaProbe) -> DsobaStatus {
    guard(|| {
        non_null!(record, probe);
        let probes = &(*record).inner.probes;
        let Some(p) = probes.get(index) else {
            return fail(DsobaStatus::InvalidArgument, "probe index out of range");
        };
        *probe = DsobaProbe {
            t: p.t as u64,
            grad_sq_norm: p.grad_sq_norm,
            phi_gap: p.phi_gap.unwrap_or(f64::NAN),
            consensus_error: p.consensus_error,
            upper_loss: p.upper_loss,
            alpha: p.alpha,
        };
        DsobaStatus::Ok
    })
}

/// Writes the record as CSV (`t,grad_sq_norm,phi_gap,consensus_error,upper_loss,alpha`).
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn dsoba_record_write_csv(record: *const DsobaRecord, path: *const c_char) -> DsobaStatus {
    guard(|| {
        non_null!(record, path);
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(DsobaStatus::InvalidArgument, "path is not UTF-8");
        };
        match write_run_csv(Path::new(path), &(*record).inner) {
            Ok(()) => DsobaStatus::Ok,
            Err(e) => from_error(&e),
        }
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsobaMetric {
    GradSqNorm = 0,
    PhiGap = 1,
    ConsensusError = 2,
    UpperLoss = 3,
    ExcessLoss = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DsobaTransient {
    pub cutoff_iteration: u64,
    pub matched: bool,
}

/// First probe from which `decentralized` stays within `(1 + rel_tol)` of
/// `centralized` after trailing-median smoothing over `window` probes.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dsoba_transient_cutoff(
    decentralized: *const DsobaRecord,
    centralized: *const DsobaRecord,
    rel_tol: f64,
    window: usize,
    metric: DsobaMetric,
    out: *mut DsobaTransient,
) -> DsobaStatus {
    guard(|| {
        non_null!(decentralized, centralized, out);
        let metric = match metric {
            DsobaMetric::GradSqNorm => TransientMetric::GradSqNorm,
            DsobaMetric::PhiGap => TransientMetric::PhiGap,
            DsobaMetric::ConsensusError => TransientMetric::ConsensusError,
            DsobaMetric::UpperLoss => TransientMetric::UpperLoss,
            DsobaMetric::ExcessLoss => TransientMetric::ExcessLoss,
        };
        match transient_cutoff(&(*decentralized).inner, &(*centralized).inner, rel_tol, window, metric) {
            Ok(e) => {
                *out = DsobaTransient { cutoff_iteration: e.cutoff_iteration as u64, matched: e.matched };
                DsobaStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}
