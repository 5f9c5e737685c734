//! Crate-wide error types.
//!
//! Errors are split by failure class so the CLI can map them onto distinct
//! exit codes: validation problems (bad shapes, bad config), numeric
//! failures (NaN losses, divergent KL, failed gradient checks), and I/O.

use thiserror::Error;

/// Errors raised by the tensor engine.
#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("{op}: {what}")]
    Domain { op: &'static str, what: String },
    #[error("KL divergence input is not on the probability simplex: {0}")]
    NotSimplex(String),
    #[error("KL divergence is infinite: target has zero mass at index {index} where the model distribution is positive")]
    InfiniteDivergence { index: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Errors raised by model construction, data generation, and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code used by the CLI for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Kernel(_) | Error::Config(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) => 4,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
