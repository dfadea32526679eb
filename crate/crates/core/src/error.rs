//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by any blindsr-core operation.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value failed validation. The message names the
    /// offending key and the constraint it violated.
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint file is missing, truncated, or malformed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// PNG/JPEG encode or decode failure.
    #[error("codec error: {0}")]
    Codec(String),

    /// A loss or activation became NaN/inf; training aborts on this.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Filesystem failure, annotated with the path involved.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
