use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter layout: {0}")]
    Layout(String),

    #[error("time grid is not strictly increasing at index {index}")]
    NonMonotoneGrid { index: usize },

    #[error("non-finite state encountered at simulation step {step}")]
    NonFinite { step: usize },

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("training diverged at iteration {iteration}: {source}")]
    Diverged {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("structure {0} does not support this operation")]
    UnsupportedStructure(&'static str),

    #[error("channel {0} is constant; metric or normalization is undefined")]
    ConstantChannel(String),

    #[error("csv {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
