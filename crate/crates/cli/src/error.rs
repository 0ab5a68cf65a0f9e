//! Command failures and their process exit codes.

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unknown method, invalid configuration values.
    #[error("{0}")]
    Usage(String),
    /// Unreadable or malformed dataset, trajectory or config file.
    #[error("{0}")]
    Data(String),
    /// Failure while writing results or any other unexpected condition.
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Internal(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Internal(_) => "internal",
        }
    }

    /// Single-line JSON object written to standard error.
    pub fn json_line(&self) -> String {
        json!({ "error": self.kind(), "code": self.exit_code(), "message": self.to_string() }).to_string()
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub(crate) fn write_err(path: &std::path::Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Internal(format!("{}: {e}", path.display()))
}
