use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate point at ({row}, {col}) on line {line}")]
    DuplicatePoint { row: usize, col: usize, line: usize },

    #[error("every scene was dropped by the cloud filter")]
    EmptyStack,

    #[error("pixels invalid in every month: {0:?}")]
    NoValidObservation(Vec<(usize, usize)>),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
