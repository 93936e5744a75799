use std::path::PathBuf;

/// Errors raised across the engine, model, data and training layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, channel counts or hyperparameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed or out-of-range input data.
    #[error("data error: {0}")]
    Data(String),

    /// An API was called in a state where it is not meaningful.
    #[error("usage error: {0}")]
    Usage(String),

    /// A NaN or infinity appeared in a forward value, loss or gradient.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Batch-norm evaluation requested before any training step.
    #[error("uninitialized statistics in {0}: run at least one training step before eval mode")]
    UninitializedStatistics(String),

    /// Broken internal invariant.
    #[error("internal error: {0}")]
    Internal(String),

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
}

pub type Result<T> = std::result::Result<T, Error>;
