use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0}")]
    Data(String),

    #[error("{file}: {message}")]
    Bundle { file: String, message: String },

    #[error("checksum mismatch for {file}: expected {expected}, found {found}")]
    Checksum {
        file: String,
        expected: String,
        found: String,
    },

    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error(
        "training aborted at epoch {epoch}: non-finite loss (l_p={l_p}, l_ns={l_ns}, l_ci={l_ci})"
    )]
    NonFiniteLoss {
        epoch: usize,
        l_p: f64,
        l_ns: f64,
        l_ci: f64,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
