use thiserror::Error;

#[derive(Debug, Error)]
pub enum FiaError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png decode: {0}")]
    PngDecode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    PngEncode(#[from] png::EncodingError),
}

impl FiaError {
    /// Errors caused by the caller's inputs rather than by the library.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            FiaError::Shape(_) | FiaError::InvalidInput(_) | FiaError::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, FiaError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FiaError::Shape(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(FiaError::InvalidInput(msg.into()))
}
