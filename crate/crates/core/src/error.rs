use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("incompatible size: {0}")]
    IncompatibleSize(String),

    #[error("weights are not doubly stochastic: {0}")]
    NonStochasticWeights(String),

    #[error("spectral gap is degenerate (rho = {rho})")]
    SpectralGapDegenerate { rho: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("lower-level solve did not reach tolerance after {iterations} iterations (residual {residual:e})")]
    LowerSolveDiverged { iterations: usize, residual: f64 },

    #[error("lower-level Hessian system could not be solved")]
    SingularHessian,

    #[error("finite-difference perturbation must be positive, got {0}")]
    DegenerateDelta(f64),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("numerical divergence at iteration {iteration}")]
    NumericalDivergence { iteration: usize },

    #[error("wall-clock limit exceeded at iteration {iteration}")]
    TimeLimit { iteration: usize },

    #[error("probe grids differ between records")]
    GridMismatch,

    #[error("empty input")]
    EmptyInput,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid value for `{key}`: {message}")]
    Validation { key: String, message: String },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
