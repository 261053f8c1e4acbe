use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied argument violates an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// A numerical routine failed to converge or produced non-finite output.
    #[error("computation failed: {0}")]
    Computation(String),

    /// A metric is undefined on the supplied data (e.g. a single class for AUC).
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// Some group has a zero positive-prediction rate, so the rate ratio diverges.
    #[error("infinite discrimination: group {group} has zero positive rate")]
    InfiniteDiscrimination { group: usize },

    /// A raw data file is missing a column or contains a malformed cell.
    #[error("ingestion error in {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    /// Training diverged; the partial history up to the failure is kept by the caller.
    #[error("training aborted at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
