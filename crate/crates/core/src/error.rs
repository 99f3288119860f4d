use std::path::PathBuf;

use thiserror::Error;

/// Error taxonomy shared by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A rate evaluated above its declared uniform bound.
    #[error("model bound violated: {quantity} = {value} exceeds declared bound {bound} ({diagnostic})")]
    BoundViolation {
        quantity: &'static str,
        value: f64,
        bound: f64,
        diagnostic: String,
    },

    /// The population outgrew the configured hard cap.
    #[error("resource limit: {0}")]
    Resource(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("feature unavailable: {0}")]
    FeatureUnavailable(String),

    /// Bookkeeping disagreed with itself; indicates a simulator bug.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("configuration error in {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
