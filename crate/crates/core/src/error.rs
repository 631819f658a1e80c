use std::path::PathBuf;

use iceg_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IcegError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("no mask found for image `{stem}` in {dir}")]
    MissingMask { stem: String, dir: PathBuf },
    #[error("failed to load dataset: {0}")]
    Load(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl IcegError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        IcegError::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than internal faults.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, IcegError::Tensor(_) | IcegError::Diverged(_))
    }
}

pub type Result<T, E = IcegError> = std::result::Result<T, E>;
