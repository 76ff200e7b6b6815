use thiserror::Error;

use crate::lp::LpError;

/// Errors raised by the audit engine and its loaders.
#[derive(Debug, Error)]
pub enum AuditError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("stratum {stratum} is exhausted")]
    Exhausted {
        /// Numbered from 1, as shown to users.
        stratum: usize,
    },

    #[error("every stratum is exhausted")]
    AllExhausted,

    #[error("audit already stopped")]
    Stopped,

    #[error("linear program failed: {0}")]
    Lp(#[from] LpError),

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("fixture rejected: {0}")]
    Fixture(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AuditError {
    pub(crate) fn parse(line: u64, message: impl Into<String>) -> Self {
        AuditError::Parse {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T, E = AuditError> = std::result::Result<T, E>;
