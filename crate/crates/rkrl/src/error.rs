use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("{what}: expected length {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{what} contains a non-finite value")]
    NonFinite { what: &'static str },

    #[error("action index {action} out of range (network has {n_actions} actions)")]
    ActionOutOfRange { action: usize, n_actions: usize },

    #[error("{what}: {message}")]
    InvalidArgument { what: &'static str, message: String },

    #[error("transition has no candidate next states")]
    EmptyCandidates,

    #[error("update batch is empty")]
    EmptyBatch,

    #[error("replay buffer holds {len} transitions, need at least {need}")]
    BufferUnderfilled { len: usize, need: usize },

    #[error("config error at line {line}: key `{key}`: {message}")]
    Config {
        line: usize,
        key: String,
        message: String,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn checkpoint(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            message: message.into(),
        }
    }
}
