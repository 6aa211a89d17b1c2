use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate token {0:?} in vocabulary")]
    DuplicateToken(String),
    #[error("vocabulary is missing the special token {0:?}")]
    MissingSpecialToken(&'static str),
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("token id {id} out of range for {classes} classes")]
    IdOutOfRange { id: usize, classes: usize },
    #[error("malformed InkML at line {line}, column {column}: {message}")]
    Xml { line: u32, column: u32, message: String },
    #[error("trace {trace}: {message}")]
    BadTrace { trace: String, message: String },
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("config key {key:?}: {message}")]
    Config { key: String, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss component {part} ({value})")]
    NonFinite { part: &'static str, value: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
