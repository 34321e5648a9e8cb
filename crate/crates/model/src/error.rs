pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite loss at batch {batch}: {diagnostics}")]
    NonFiniteLoss { batch: usize, diagnostics: String },

    #[error("transcriber unavailable: {0}")]
    TranscriberUnavailable(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] ser_core::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidInput(message.into())
    }

    pub(crate) fn checkpoint(message: impl Into<String>) -> Self {
        Error::Checkpoint(message.into())
    }
}
