use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    /// A required artifact (trained model, checkpoint, corpus) is missing.
    #[error("not ready: {0}")]
    NotReady(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    /// A mask region vanished after resampling to a coarser resolution.
    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn not_ready(msg: impl Into<String>) -> Self {
        Error::NotReady(msg.into())
    }

    pub fn load(path: impl Into<PathBuf>, reason: impl std::fmt::Display) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// Process exit code used by the CLI: 2 validation, 3 not-ready, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::EmptyMask(_)
            | Error::DegenerateRegion(_)
            | Error::Load { .. }
            | Error::Json(_) => 2,
            Error::NotReady(_) => 3,
            Error::Numerical(_) | Error::Tensor(_) => 4,
            Error::Io(_) | Error::Image(_) => 1,
        }
    }
}
