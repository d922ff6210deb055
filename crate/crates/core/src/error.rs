use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DebiasError {
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("template `{template}`: expected exactly one placeholder, found {found}")]
    Placeholder { template: String, found: usize },

    #[error("sequence of length {len} exceeds context length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    InvalidInput(String),

    #[error("missing coverage for option `{option}`: no samples for {missing:?}")]
    MissingCoverage { option: String, missing: Vec<String> },
}

impl DebiasError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = DebiasError> = std::result::Result<T, E>;
