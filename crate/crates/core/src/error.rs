use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GlsError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("loss term {0} is not finite")]
    NonFiniteLoss(String),

    /// A loss term became NaN or infinite during optimization.
    #[error("training diverged: {term} is not finite at iteration {iteration}")]
    Divergence { term: String, iteration: usize },

    #[error("scene is empty: {0}")]
    EmptyScene(String),

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, GlsError>;

impl GlsError {
    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl std::fmt::Display) -> Self {
        GlsError::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
