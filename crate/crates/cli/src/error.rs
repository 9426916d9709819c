use std::path::Path;

use thiserror::Error;

/// Failure classes, one per exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Schema(_) => 2,
            CliError::Capacity(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<softseq::Error> for CliError {
    fn from(err: softseq::Error) -> Self {
        match err {
            softseq::Error::Capacity { .. } => CliError::Capacity(err.to_string()),
            softseq::Error::Divergence { .. } => CliError::Verification(err.to_string()),
            other => CliError::Schema(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
