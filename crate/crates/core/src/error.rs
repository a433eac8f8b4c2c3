use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("unavailable: {0}")]
    Unavailable(String),

    #[error("task index {index} out of range for {len} training tasks")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite value in {what} at epoch {epoch}")]
    NonFinite { what: String, epoch: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
