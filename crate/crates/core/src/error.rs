use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GvfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GvfError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("unsupported: {0}")]
    Capability(String),

    #[error("singular gauge at point {point:?} (|det| = {det:e})")]
    Gauge { point: Vec<f64>, det: f64 },

    #[error("Cholesky failed after maximum jitter {jitter:e}; smallest eigenvalue {min_eigenvalue:e}")]
    Conditioning { min_eigenvalue: f64, jitter: f64 },

    #[error("invalid variational state: {0}")]
    State(String),

    #[error("optimization diverged at step {step}: {reason}")]
    Optimization { step: usize, reason: String },

    #[error("trajectory diverged at step {step}")]
    Divergence { step: usize },

    #[error("format error at row {row}: {message}")]
    Format { row: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GvfError {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        GvfError::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GvfError::Io {
            path: path.into(),
            source,
        }
    }
}
