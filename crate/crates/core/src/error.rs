use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor had the wrong extent along some axis.
    #[error("dimension error on {axis}: {detail}")]
    Dimension { axis: String, detail: String },

    /// A numeric parameter was outside its allowed range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// The API was driven in an invalid order or with unusable inputs.
    #[error("usage error: {0}")]
    Usage(String),

    /// A file was missing, unreadable or malformed.
    #[error("input error at {path}: {detail}")]
    Input { path: PathBuf, detail: String },

    /// A text record could not be parsed.
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    /// A statistic is undefined for the given inputs (zero variance, zero baseline).
    #[error("undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(axis: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Dimension {
            axis: axis.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn input(path: impl Into<PathBuf>, detail: impl std::fmt::Display) -> Self {
        Error::Input {
            path: path.into(),
            detail: detail.to_string(),
        }
    }
}
