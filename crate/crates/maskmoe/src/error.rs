//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("mask error: {0}")]
    Mask(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("file format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("run {name}: {source}")]
    Run {
        name: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    /// Attach the name of the run an error came from.
    pub fn in_run(self, name: impl Into<String>) -> Self {
        Error::Run { name: name.into(), source: Box::new(self) }
    }
}
