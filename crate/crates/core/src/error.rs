use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: String, right: String },

    #[error("timestep {t} out of range for this operation (T = {steps})")]
    Timestep { t: usize, steps: usize },

    #[error("prompt kind {0} is not supported by this backbone")]
    UnsupportedPrompt(String),

    #[error("non-finite value at iteration {iteration} ({phase})")]
    NonFinite { phase: String, iteration: usize },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("missing {0}")]
    Missing(String),

    #[error("bad tensor container {path:?}: {reason}")]
    Container { path: PathBuf, reason: String },

    #[error("image {path:?}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid { field: field.into(), reason: reason.into() }
    }

    /// Name of the offending field for validation errors.
    pub fn field(&self) -> Option<&str> {
        match self {
            Error::Invalid { field, .. } => Some(field),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
