use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the restoration library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported audio format: {0}")]
    Format(String),

    #[error("index out of range: {0}")]
    Bounds(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("degenerate gaussian-process fit: {0}")]
    DegenerateFit(String),

    #[error("no pulse evidence: max(mu - mu_median) = {max_excess:e} is not positive")]
    NoPulseEvidence { max_excess: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("insufficient context: {0}")]
    Context(String),

    #[error("invalid injection spec: {0}")]
    Spec(String),

    #[error("sampler failed at iteration {iteration}: {source}")]
    Sampler {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
