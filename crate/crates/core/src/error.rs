//! Shared error type for the whole pipeline.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A dataset root is missing files or has an unexpected layout.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// An image file exists but cannot be decoded.
    #[error("failed to decode image {path}: {reason}")]
    ImageDecode { path: PathBuf, reason: String },

    /// Tensor/matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A binary container is truncated, has a bad magic tag, or carries an
    /// unsupported version.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Invalid configuration or precondition violation.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The optimizer produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    /// A numerical routine (eigendecomposition, solver) failed.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
