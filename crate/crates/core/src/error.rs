//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by tensor ops, networks, I/O and the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are invalid for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numeric failure (NaN/Inf loss, non-finite activations).
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    /// A required artifact (checkpoint, library, manifest) is missing.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// A checkpoint was produced for a different network kind.
    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },

    /// Malformed file contents (PGM header, manifest line, checkpoint).
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op: op.into(),
            detail: detail.into(),
        }
    }
}
