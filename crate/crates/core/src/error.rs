use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes, unknown kinds, bad hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("dtype mismatch in {op}: expected {expected:?}, found {found:?}")]
    DType {
        op: &'static str,
        expected: crate::tensor::DType,
        found: crate::tensor::DType,
    },

    /// A NaN or infinity appeared in a forward or backward pass.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at round {round} on client {client}: {detail}")]
    Divergence {
        round: usize,
        client: usize,
        detail: String,
    },

    #[error("wire format: {0}")]
    Wire(String),

    #[error("feature file format: {0}")]
    Format(String),

    /// Precondition of an aggregation, metric or protocol step is not met.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl Error {
    /// Process exit code: 2 configuration, 3 divergence, 4 I/O or file format, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::Divergence { .. } | Error::NonFinite(_) => 3,
            Error::Io { .. } | Error::Format(_) | Error::Wire(_) => 4,
            Error::Shape { .. } | Error::DType { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
