//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the engine. Variants map one-to-one onto the
/// machine-parsable categories printed by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement, e.g. matmul inner dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Token id outside its declared vocabulary range.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint container is malformed, the wrong version, or corrupt.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A loss or logit became NaN/Inf; the payload is a diagnostic dump.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    /// Stable category tag for machine-readable CLI output.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Vocab(_) => "vocab",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite(_) => "nonfinite",
            Error::Io(_) => "io",
            Error::Serde(_) => "serde",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
