use thiserror::Error;

/// Unified error type for the crate.
///
/// Checkpoint loading distinguishes version, truncation, and config-hash
/// failures so callers can react to each separately.
#[derive(Debug, Error)]
pub enum MagicError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint version mismatch: {0}")]
    CheckpointVersion(String),

    #[error("truncated payload: {0}")]
    CheckpointTruncated(String),

    #[error("config hash mismatch: {0}")]
    CheckpointConfigHash(String),

    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl MagicError {
    /// Stable machine-readable category, used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            MagicError::Config(_) => "config",
            MagicError::Usage(_) => "usage",
            MagicError::Input(_) => "input",
            MagicError::Internal(_) => "internal",
            MagicError::Numeric(_) => "numeric",
            MagicError::CheckpointVersion(_) => "checkpoint-version",
            MagicError::CheckpointTruncated(_) => "checkpoint-truncated",
            MagicError::CheckpointConfigHash(_) => "checkpoint-config-hash",
            MagicError::CheckpointFormat(_) => "checkpoint-format",
            MagicError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, MagicError>;
