//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or dimension mismatch; `axis` names the offending axis.
    #[error("dimension error on axis `{axis}`: {details}")]
    Dim { axis: &'static str, details: String },

    /// Input data violates a documented precondition (e.g. non-binary mask).
    #[error("validation error: {0}")]
    Validation(String),

    /// An API contract was violated by the caller (e.g. non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Inconsistent or unsupported configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Command-line or API usage error.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed file content; `offset` is the byte position of the problem.
    #[error("parse error in {path} at byte {offset}: {details}")]
    Parse {
        path: PathBuf,
        offset: u64,
        details: String,
    },

    /// Statistical test input with zero variance.
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    /// Numerical verification (gradient check or invariant) failed.
    #[error("verification failed: {0}")]
    Verification(String),

    /// A NaN or infinity was produced where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn dim(axis: &'static str, details: impl Into<String>) -> Self {
        Error::Dim {
            axis,
            details: details.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 runtime/data, 3 failed verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Verification(_) => 3,
            _ => 2,
        }
    }
}
