use std::path::PathBuf;

/// Errors produced anywhere in the simulator.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("capacity exceeded: {what} (got {got}, limit {limit})")]
    Capacity {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    #[error("unsupported rate {rate}; configured rates are {available:?}")]
    UnsupportedRate { rate: usize, available: Vec<usize> },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("training diverged: {0}")]
    TrainingDivergence(String),

    #[error("sampling diverged at step {step}")]
    SamplingDivergence { step: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("manifest entry {entry}: {msg}")]
    Manifest { entry: String, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
