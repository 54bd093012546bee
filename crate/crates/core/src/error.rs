use std::path::PathBuf;

use thiserror::Error;

use crate::diffcore::DiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },
    #[error("ambiguous classification: {0}")]
    Ambiguous(String),
    #[error("training diverged at epoch {epoch}, step {step}; last finite loss {last_finite_loss}")]
    Diverged { epoch: usize, step: usize, last_finite_loss: f64 },
    #[error("refusing to write into non-empty directory {0} (use --force)")]
    OutputExists(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load { path: path.into(), reason: reason.into() }
    }
}
