use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite gradient in parameter `{0}`")]
    NonFinite(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn param_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Param(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
