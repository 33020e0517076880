use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("matrix is not symmetric (relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    /// Cholesky failed for every jitter level. Usually a sign that the kernel
    /// hyperparameters have drifted into a badly conditioned region.
    #[error("cholesky failed for a {dim}x{dim} matrix even with jitter {max_jitter:e}")]
    JitterExhausted { dim: usize, max_jitter: f64 },

    #[error("parameter `{0}` is not registered")]
    UnregisteredParameter(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("quadrature order must be at least 1, got {0}")]
    QuadratureOrderInvalid(usize),

    #[error("non-finite objective at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, used in machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::NotSymmetric { .. } => "NotSymmetric",
            Error::JitterExhausted { .. } => "JitterExhausted",
            Error::UnregisteredParameter(_) => "UnregisteredParameter",
            Error::DegenerateData(_) => "DegenerateData",
            Error::QuadratureOrderInvalid(_) => "QuadratureOrderInvalid",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::Parse { .. } => "ParseError",
            Error::EmptyDataset => "EmptyDataset",
            Error::Config { .. } => "ConfigError",
            Error::Checkpoint(_) => "CheckpointError",
            Error::Io { .. } => "IoError",
            Error::Json(_) => "JsonError",
        }
    }

    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
