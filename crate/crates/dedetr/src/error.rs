use std::io;

use dedetr_core::protocol::ProtocolError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid arguments: {0}")]
    Usage(String),
    #[error("unknown run id {0}")]
    UnknownRun(String),
    #[error("{0}")]
    Protocol(#[from] ProtocolError),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        CliError::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn format(what: &'static str, detail: impl Into<String>) -> Self {
        CliError::Format { what, detail: detail.into() }
    }

    /// 1 for anything the user can fix by changing inputs, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::UnknownRun(_) => 1,
            CliError::Protocol(ProtocolError::Config(_)) => 1,
            _ => 2,
        }
    }
}
