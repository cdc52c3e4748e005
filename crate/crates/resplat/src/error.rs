//! Error taxonomy shared across the crate.

use thiserror::Error;

/// Crate-wide error type. Variants map onto the failure classes surfaced by
/// the CLI: invalid input (exit 2) versus runtime failure (exit 3).
#[derive(Debug, Error)]
pub enum Error {
    /// Caller-supplied value violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed scene or trajectory file. `offset` is the byte (or line)
    /// position where decoding failed.
    #[error("format error at offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// Stereo rig geometry from which no unified view can be built.
    #[error("degenerate stereo rig: {0}")]
    DegenerateRig(String),

    /// Numeric operation left its domain (singular covariance, non-finite
    /// intermediate where finiteness is required).
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// Internal cache bookkeeping contradiction. Indicates a pipeline bug,
    /// never a bad input.
    #[error("cache consistency violation: {0}")]
    CacheConsistency(String),

    /// Failure while driving a session or writing artifacts.
    #[error("runtime failure: {0}")]
    Runtime(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Format { .. } => 2,
            _ => 3,
        }
    }
}
