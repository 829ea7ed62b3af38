//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite logit at index {index}: {value}")]
    NonFiniteLogit { index: usize, value: f64 },

    #[error("probability vector invalid: {0}")]
    InvalidProbVector(String),

    #[error("uniform draw {0} outside [0, 1]")]
    UniformDrawOutOfRange(f64),

    #[error("alpha {0} outside the open interval (0, 1)")]
    AlphaOutOfRange(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty score list")]
    EmptyScores,

    #[error("arm {arm} has zero probability under the policy; cannot importance-weight")]
    ZeroPropensity { arm: usize },

    #[error("policy `{policy}` needs {required}")]
    MissingPolicyContext {
        policy: &'static str,
        required: &'static str,
    },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("snapshot format: {0}")]
    Snapshot(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("run aborted at instance {step}: {source}")]
    RunAborted {
        step: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// True for errors a user fixes by editing configuration rather than
    /// anything that happened while a run was executing.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
