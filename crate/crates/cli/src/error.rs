use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("checkpoint {0} does not exist (pass --checkpoint or set TXST_CHECKPOINT)")]
    MissingCheckpoint(PathBuf),

    #[error(transparent)]
    Core(#[from] txst_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Error line printed to stderr.
#[derive(Debug, Serialize)]
pub struct ErrorLine {
    pub error: &'static str,
    pub message: String,
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::MissingCheckpoint(_) => "missing_checkpoint",
            CliError::Core(txst_core::Error::ConfigMismatch { .. }) => "config_mismatch",
            CliError::Core(txst_core::Error::Config(_)) => "config",
            CliError::Core(_) => "runtime",
            CliError::Io(_) => "io",
            CliError::Json(_) => "json",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(txst_core::Error::Config(_)) => 2,
            CliError::MissingCheckpoint(_)
            | CliError::Core(txst_core::Error::ConfigMismatch { .. }) => 3,
            _ => 1,
        }
    }

    pub fn line(&self) -> ErrorLine {
        ErrorLine {
            error: self.kind(),
            message: self.to_string(),
        }
    }
}
