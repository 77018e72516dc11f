use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossBreakdown;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("cannot decode {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("unpaired file: {0}")]
    Pairing(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("{what} unavailable: {hint}")]
    Dependency { what: String, hint: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("training diverged at step {step}: {breakdown}")]
    Divergence { step: u64, breakdown: LossBreakdown },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        let path = path.into();
        if source.kind() == io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Format { path: path.into(), msg: msg.to_string() }
    }
}
