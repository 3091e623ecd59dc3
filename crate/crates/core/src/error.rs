use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point depth {depth:e} is too close to the camera plane")]
    DegenerateDepth { depth: f64 },

    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("frame mismatch: {0} vs {1}")]
    FrameMismatch(i64, i64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("no valid target joints")]
    NoValidTargets,

    #[error("no valid joints to evaluate")]
    NoValidJoints,

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("sequence is empty")]
    EmptySequence,

    #[error("input is empty")]
    EmptyInput,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input {path}: {message}")]
    Input { path: PathBuf, message: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

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

    pub(crate) fn input(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Input {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
