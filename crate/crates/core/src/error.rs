use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    /// A caller named something that does not exist (method, flag, key).
    #[error("usage error: {0}")]
    Usage(String),

    /// A metric is undefined for the given data (e.g. NSE of constant truth).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("format error in {file} ({field}): {message}")]
    Format {
        file: PathBuf,
        field: String,
        message: String,
    },

    #[error("training diverged at step {step}: {diagnostics}")]
    Divergence { step: usize, diagnostics: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(file: impl Into<PathBuf>, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
