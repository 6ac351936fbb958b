use thiserror::Error;

pub type Result<T, E = SrmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SrmError {
    #[error("length {requested} exceeds the maximum context of {n_ctx}")]
    Length { requested: usize, n_ctx: usize },

    #[error("context overflow: position {position} is past the maximum context of {n_ctx}")]
    ContextOverflow { position: usize, n_ctx: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("token id {id} is out of range for vocabulary size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("every position of the batch is masked out")]
    EmptyMask,

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("verifier failed: {0}")]
    Verifier(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SrmError {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        SrmError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
