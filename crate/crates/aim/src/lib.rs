//! File formats, batch prefetching and the `aim` command-line driver built on
//! [`aim_core`].

pub mod checkpoint;
pub mod cli;
pub mod conf;
pub mod dump;
pub mod metrics;
pub mod prefetch;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AimError {
    #[error(transparent)]
    Core(#[from] aim_core::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("config file line {line}: {message}")]
    ConfFile { line: usize, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: {0}")]
    CheckFailed(String),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl AimError {
    /// 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            AimError::Usage(_) | AimError::ConfFile { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, AimError>;
