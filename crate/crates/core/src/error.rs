use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped so the command-line front end can print a category
/// tag in front of every failure (`contract`, `io`, `config`, ...).
#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called outside its documented preconditions.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Dataset loading failed; every offending record is listed.
    #[error("dataset error: {} problem(s): {}", .0.len(), .0.join("; "))]
    Data(Vec<String>),

    #[error("non-finite loss at step {step} (batch ids {batch_ids:?}): {terms}")]
    NonFinite {
        step: u64,
        batch_ids: Vec<String>,
        terms: String,
    },

    #[error("evaluation error: {0}")]
    Eval(String),
}

impl Error {
    /// Short category tag used in CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Contract(_) | Error::Shape { .. } => "contract",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Data(_) => "data",
            Error::NonFinite { .. } => "numeric",
            Error::Eval(_) => "eval",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
