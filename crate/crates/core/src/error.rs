use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("contact solve did not converge after {iterations} iterations (residual {residual:.3e})")]
    SolverFailure {
        iterations: usize,
        residual: f64,
        /// Last iterate of the next state, kept for diagnosis only.
        last_state: Option<Vec<f64>>,
    },

    #[error("no consistent contact mode found ({modes_tried} modes tried)")]
    NoConsistentMode { modes_tried: usize },

    #[error("schema error in {path}: {message}")]
    Schema { path: String, message: String },

    #[error("frame times are not strictly increasing at frame {index} (t = {time})")]
    NonMonotoneTimes { index: usize, time: f64 },

    #[error("missing mapping for `{0}`")]
    MissingMapping(String),

    #[error("non-finite linearization at reference step {step}")]
    NonFiniteJacobian { step: usize },

    #[error("controller diverged at t = {time:.3} s: {reason}")]
    Divergence { time: f64, reason: String },

    #[error("unknown channel `{name}`; valid channels: {valid}")]
    UnknownChannel { name: String, valid: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
