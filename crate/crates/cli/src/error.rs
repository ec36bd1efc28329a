use std::path::Path;

use thiserror::Error;

use crate::checkpoint::CheckpointError;

/// Command failure, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments (exit code 1).
    #[error("{0}")]
    Validation(String),
    /// Anything that went wrong while running (exit code 2).
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<hmcseg::Error> for CliError {
    fn from(e: hmcseg::Error) -> Self {
        match e {
            hmcseg::Error::InvalidConfig(_) => CliError::Validation(e.to_string()),
            e => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(format!("json: {e}"))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(format!("csv: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
