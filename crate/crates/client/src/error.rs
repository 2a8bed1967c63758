use ros_core::{ErrorCode, ServerError};
use ros_transfer::TransferError;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("server: {0}")]
    Server(#[from] ServerError),
    /// No server in the configured list could be reached.
    #[error("reference server unavailable: {0}")]
    Unavailable(String),
    /// The connection was lost mid-call and the handle moved to a backup;
    /// the operation may be retried.
    #[error("failed over to another server; retry the operation")]
    FailedOver,
    #[error("mutability violation: {0}")]
    MutabilityViolation(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("transfer: {0}")]
    Transfer(#[from] TransferError),
    #[error("entry {entry} failed its checksum from {attempts} sources")]
    Checksum { entry: usize, attempts: u32 },
    #[error("offload buffer could not be allocated")]
    OffloadFailed,
    #[error("timed out")]
    Timeout,
}

impl ClientError {
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Server(e) => Some(e.code),
            _ => None,
        }
    }

    /// True when repeating the call later can succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            ClientError::Server(e) => e.code.is_retryable(),
            ClientError::Unavailable(_) | ClientError::FailedOver | ClientError::Timeout => true,
            ClientError::Transfer(_) | ClientError::Checksum { .. } => true,
            _ => false,
        }
    }
}
