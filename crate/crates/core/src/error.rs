use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("not a probability vector: {0}")]
    NotNormalized(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("backward called on a value that does not depend on any trainable tensor")]
    Detached,

    #[error("KV cache overflow: {needed} positions exceed capacity {capacity}")]
    CacheOverflow { needed: usize, capacity: usize },

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("tree spec line {line}: {msg}")]
    TreeSpec { line: usize, msg: String },

    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
