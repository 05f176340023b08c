use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in `{name}` at flat index {index}")]
    NonFinite { name: String, index: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("no positive labels")]
    NoPositives,

    #[error("{path}: bad magic bytes (expected {expected:?})")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: unsupported version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: file truncated")]
    Truncated { path: PathBuf },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("gradient check failed: relative error {error:e} at {param}[{index}] exceeds {tolerance:e}")]
    Tolerance {
        param: String,
        index: usize,
        error: f64,
        tolerance: f64,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag for machine-readable CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite { .. } => "non_finite",
            Error::NotScalar(_) => "not_scalar",
            Error::NoPositives => "no_positives",
            Error::BadMagic { .. } => "bad_magic",
            Error::Version { .. } => "version",
            Error::Truncated { .. } => "truncated",
            Error::Format { .. } => "format",
            Error::Mismatch(_) => "mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io { .. } => "io",
            Error::Tolerance { .. } => "tolerance",
            Error::Json(_) => "json",
        }
    }
}
