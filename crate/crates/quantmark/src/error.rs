use thiserror::Error;

/// Errors across the toolkit. Contract violations (`Contract`) are caller
/// bugs; `Invariant` means an internal guarantee was broken and the run must
/// abort.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("planting failed: {0}")]
    Planting(String),

    #[error("tokenizer: unsupported character {ch:?}")]
    Tokenizer { ch: char },

    #[error("corpus generation: {0}")]
    Corpus(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
