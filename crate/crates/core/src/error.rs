//! Crate-wide error type.

use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DfrdError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    /// A teacher could not answer query number `seq` of a reconstruction run.
    #[error("transfer failed at query {seq}: {reason}")]
    Transfer { seq: u64, reason: String },

    #[error("protocol error [{code}]: {msg}")]
    Protocol { code: String, msg: String },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DfrdError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DfrdError::InvalidInput(msg.into())
    }

    pub(crate) fn protocol(code: &str, msg: impl Into<String>) -> Self {
        DfrdError::Protocol {
            code: code.to_string(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DfrdError>;
