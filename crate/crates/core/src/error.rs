//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty panel")]
    EmptyPanel,

    #[error("unknown generator `{0}`")]
    UnknownGenerator(String),

    #[error("year {0} not present in panel")]
    UnknownYear(i32),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("model is untrained")]
    UntrainedModel,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code: 2 for input/config problems, 1 for computation failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::Config(_)
            | Error::EmptyPanel
            | Error::UnknownGenerator(_)
            | Error::UnknownYear(_) => 2,
            Error::Structural(_)
            | Error::UntrainedModel
            | Error::Degenerate(_)
            | Error::NoConvergence(_)
            | Error::Serialize(_) => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
