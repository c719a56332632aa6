use std::io;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or shape contract (e.g. mismatched widths).
    #[error("configuration error: {0}")]
    Config(String),

    /// The caller broke an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// A numeric routine diverged or produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed on-disk dataset.
    #[error("ingestion error at byte {offset}: {message}")]
    Ingestion { offset: u64, message: String },

    /// Checkpoint or dump contents do not match their recorded hashes.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A checkpoint from the wrong pipeline stage was supplied.
    #[error("stage order error: expected stage {expected}, found {found}")]
    StageOrder { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Usage(msg.into()))
}
