use std::path::PathBuf;

pub type Result<T, E = MustError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum MustError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("degenerate projection: linear output is the zero vector")]
    DegenerateProjection,

    #[error("degenerate class `{0}`: averaged embedding is the zero vector")]
    DegenerateClass(String),

    #[error("non-finite loss at step {step}: {breakdown:?}")]
    NonFiniteLoss { step: u64, breakdown: crate::losses::LossBreakdown },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("failed to load {path}: {msg}")]
    Load { path: PathBuf, msg: String },

    #[error("checkpoint format mismatch: expected {expected:?}, found {found:?}")]
    VersionMismatch { expected: String, found: String },

    #[error("checkpoint truncated or corrupted: {0}")]
    Truncated(String),

    #[error("resume refused, config differs in: {}", .0.join(", "))]
    ConfigMismatch(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub(crate) fn invalid_input(msg: impl Into<String>) -> MustError {
    MustError::InvalidInput(msg.into())
}

pub(crate) fn invalid_config(msg: impl Into<String>) -> MustError {
    MustError::InvalidConfig(msg.into())
}
