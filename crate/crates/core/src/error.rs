use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or configuration mismatch between tensors, layers, or configs.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed file or header.
    #[error("format error: {0}")]
    Format(String),
    /// Stream or payload damaged / truncated.
    #[error("corrupt stream: {0}")]
    Corrupt(String),
    /// Compressed data was produced by a different model.
    #[error("model mismatch: container digest {container:016x} != loaded model digest {model:016x}")]
    ModelMismatch { container: u64, model: u64 },
    /// NaN/Inf appeared where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corrupt(msg.into())
    }
}
