use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Tensor shapes do not line up for the requested operation.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An argument is outside the operation's documented domain.
    #[error("{op}: invalid argument: {detail}")]
    InvalidArg { op: &'static str, detail: String },

    /// A forward or backward pass produced NaN/Inf.
    #[error("{op}: non-finite value: {detail}")]
    NonFinite { op: &'static str, detail: String },

    /// Dataset layout or content problem (missing directory, size mismatch).
    #[error("dataset: {0}")]
    Dataset(String),

    /// Checkpoint file is malformed or incompatible.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Configuration failed validation.
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::InvalidArg {
            op,
            detail: detail.into(),
        }
    }

    pub fn non_finite(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::NonFinite {
            op,
            detail: detail.into(),
        }
    }
}
