use std::path::PathBuf;

use thiserror::Error;

use crate::optim::OptimizerId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in group `{group}` at index {index}")]
    NonFinite { group: String, index: usize },

    #[error("numerical failure in `{optimizer}` update at index {index}")]
    NumericalFailure {
        optimizer: OptimizerId,
        index: usize,
    },

    #[error("non-finite activation in model forward pass")]
    NonFiniteActivation,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no optimizer left to select: active and fallback candidate sets are both empty")]
    CandidatesExhausted,

    #[error("optimizer `{0}` has no update rule in this crate")]
    UnsupportedOptimizer(OptimizerId),

    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {reason}", path.display())]
    Parse { path: PathBuf, reason: String },

    #[error("suite directory is incomplete, missing runs: {}", .0.join(", "))]
    IncompleteSuite(Vec<String>),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
