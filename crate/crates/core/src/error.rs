use std::io;

use autodiff::checkpoint::CheckpointError;
use autodiff::TensorError;
use thiserror::Error;

use crate::sudoku::DataError;

#[derive(Debug, Error)]
pub enum UtmError {
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

impl UtmError {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        UtmError::Config { key: key.into(), msg: msg.into() }
    }

    /// Machine-readable category, also used for process exit codes.
    pub fn category(&self) -> (&'static str, i32) {
        match self {
            UtmError::Config { .. } => ("config", 2),
            UtmError::Io(_) | UtmError::Json(_) => ("io", 3),
            UtmError::Data(_) => ("data", 4),
            UtmError::Checkpoint(_) => ("checkpoint", 5),
            UtmError::Tensor(_) | UtmError::Invalid(_) => ("internal", 1),
        }
    }
}

pub type Result<T, E = UtmError> = std::result::Result<T, E>;
