use thiserror::Error;

/// Failure classes of the command line, each with its own exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration.
    #[error("invalid configuration: {0}")]
    Validation(String),
    /// A certification check failed.
    #[error("check failed: {0}")]
    CheckFailed(String),
    /// Reading or writing files failed.
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// Process exit status: 1 validation, 2 check failure, 3 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::CheckFailed(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
