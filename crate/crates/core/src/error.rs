use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MlreError {
    #[error("invalid configuration at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no strictly ordered trajectory pair exists ({0} trajectories)")]
    NoOrderedPairs(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed {context}: {reason}")]
    Parse { context: String, reason: String },

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MlreError {
    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        MlreError::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn parse(context: impl Into<String>, reason: impl Into<String>) -> Self {
        MlreError::Parse {
            context: context.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MlreError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 validation, 2 numerical failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            MlreError::Config { .. }
            | MlreError::Contract(_)
            | MlreError::NoOrderedPairs(_)
            | MlreError::Parse { .. } => 1,
            MlreError::NonFinite(_) => 2,
            MlreError::Io { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, MlreError>;
