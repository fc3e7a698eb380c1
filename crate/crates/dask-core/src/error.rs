use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint magic mismatch")]
    CheckpointMagic,

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    CheckpointKind { expected: String, found: String },

    #[error("checkpoint shape mismatch: {0}")]
    CheckpointShape(String),

    #[error("data format error: {0}")]
    DataFormat(String),

    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
