use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("malformed bin: {0}")]
    MalformedBin(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] pillars_core::Error),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl HarnessError {
    /// Process exit code: 1 for a failed check, 2 for bad input.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::CheckFailed(_) => 1,
            _ => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
