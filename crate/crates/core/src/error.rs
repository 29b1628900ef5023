use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input whose norm is too small to normalize.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A caller broke a precondition (bad label, bad dimension, stale cache).
    #[error("contract violation: {0}")]
    Contract(String),

    /// State that has not been initialized yet (class GMM, prototypes, priors).
    #[error("not ready: {0}")]
    NotReady(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Input files that parse but disagree with each other.
    #[error("inconsistent inputs: {0}")]
    Input(String),

    #[error("unsupported format version: {0}")]
    Version(String),

    #[error("config error for key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 for IO and input problems, 3 for contract and
    /// readiness failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Degenerate(_) | Error::Contract(_) | Error::NotReady(_) => 3,
            Error::Parse { .. }
            | Error::Input(_)
            | Error::Version(_)
            | Error::Config { .. }
            | Error::Io(_)
            | Error::Serde(_) => 2,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn not_ready(msg: impl Into<String>) -> Self {
        Error::NotReady(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: msg.into(),
        }
    }
}
