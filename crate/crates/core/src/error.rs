use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed on-disk data (CIFAR batches, CSV sidecars, checkpoints).
    #[error("format error: {0}")]
    Format(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition (shapes, class ranges, ...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// A loss term or intermediate went NaN/inf.
    #[error("non-finite value in {term}: {value}")]
    NonFinite { term: String, value: f64 },

    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn check_finite(term: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { term: term.to_string(), value })
    }
}
