//! Crate-wide error type with process exit-code mapping for the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("integrity error: unknown sku references: {0:?}")]
    Integrity(Vec<String>),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Exit code contract: 0 success, 1 usage/config, 2 data, 3 training divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::Shape(_) | Error::Length(_)
            | Error::Range(_) => 1,
            Error::Parse { .. }
            | Error::Data(_)
            | Error::Integrity(_)
            | Error::Checkpoint(_)
            | Error::Io(_)
            | Error::Json(_) => 2,
            Error::TrainingDiverged(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
