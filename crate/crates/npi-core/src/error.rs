use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("context length {len} exceeds maximum {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("injection shape mismatch: {0}")]
    Injection(String),
    #[error("classifier gate not met: {0}")]
    Gate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
