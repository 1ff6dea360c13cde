use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A loss or prediction came out NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A training step produced a non-finite loss or parameter.
    #[error("training diverged at task {task}, step {step}: {detail}")]
    Divergence {
        task: usize,
        step: usize,
        detail: String,
    },

    /// Guided inference needs at least one learned prompt.
    #[error("prompt store is empty: no knowledge yet")]
    EmptyStore,

    #[error("requested {requested} distinct scenes but only {available} are available")]
    InsufficientCombinations { requested: usize, available: usize },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl ToString) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
