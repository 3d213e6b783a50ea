use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Parameters and inputs disagree on structure (channel counts, dims).
    #[error("configuration error: {0}")]
    Config(String),

    /// The caller handed in something outside the operation's domain.
    #[error("input error: {0}")]
    Input(String),

    #[error("numeric error in {context}: non-finite value{}", index.map(|i| format!(" at parameter index {i}")).unwrap_or_default())]
    NonFinite { context: String, index: Option<usize> },

    #[error("{path}:{line}: {message}")]
    Ingest { path: PathBuf, line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("training aborted at step {step}: non-finite {term}{}", last_good.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    TrainingDiverged { step: usize, term: String, last_good: Option<PathBuf> },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: png: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite { context: context.into(), index: None }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use input_err;
