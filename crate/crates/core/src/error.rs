//! Error type shared by every module in the crate.

use std::fmt;
use std::io;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by model construction, execution, data handling and I/O.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration: shape mismatches, bad hyperparameters,
    /// unbuildable model specs.
    Config(String),
    /// Invalid runtime input (e.g. a class label out of range).
    Input(String),
    /// API misuse: backward before forward, beta sampled before alpha,
    /// schedule queried past the end of training.
    Usage(String),
    /// A forward operation produced NaN or Inf.
    NonFinite { op: &'static str },
    /// Malformed external data (dataset files, checkpoints).
    Format(String),
    /// Correlation is undefined because one stream has zero variance.
    UndefinedCorrelation,
    /// Training diverged: non-finite loss or gradients.
    Diverged { epoch: usize, step: usize },
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::NonFinite { op } => {
                write!(f, "non-finite value produced by operation `{op}`")
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::UndefinedCorrelation => {
                write!(f, "correlation undefined: zero variance in at least one stream")
            }
            Error::Diverged { epoch, step } => {
                write!(f, "training diverged at epoch {epoch}, step {step}")
            }
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}
