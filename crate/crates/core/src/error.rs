//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by the tensor engine, models, data pipeline and trainers.
#[derive(Debug, Error)]
pub enum CoreError {
    /// An operation received tensors whose shapes do not conform.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An argument was outside the operation's domain.
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    /// A non-finite value (NaN or Inf) was produced where finiteness is required.
    #[error("numeric failure in {op}: non-finite value encountered")]
    NumericFailure { op: String },

    /// Dataset generation or lookup failed.
    #[error("data error: {0}")]
    Data(String),

    /// Serialized artifact (clip file, checkpoint, manifest) is malformed.
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// Linear fit requested on degenerate inputs (all abscissae equal).
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
