use std::path::Path;

use confforge::Error as CoreError;
use thiserror::Error;

/// Failure classes with stable process exit codes.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CliError {
    /// Bad flags or configuration. Exit code 1.
    #[error("{0}")]
    Usage(String),
    /// Unreadable, malformed or invalid input data. Exit code 2.
    #[error("{0}")]
    Data(String),
    /// A computation could not produce a usable result. Exit code 3.
    #[error("{0}")]
    Numerical(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }

    pub fn write(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Usage(format!("cannot write {}: {err}", path.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::InvalidAlpha(_)
            | CoreError::InvalidTau(_)
            | CoreError::InvalidConfig(_)
            | CoreError::MinBinTooSmall { .. } => CliError::Usage(msg),
            CoreError::NonFiniteLoss(_) | CoreError::DegenerateInput(_) | CoreError::InvalidScore(_) => {
                CliError::Numerical(msg)
            }
            _ => CliError::Data(msg),
        }
    }
}
