use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid data values, e.g. labels out of range or duplicate points.
    #[error("input error: {0}")]
    Input(String),

    /// Invalid arguments or configuration.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed file contents.
    #[error("format error in {path} at byte offset {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// A NaN or infinity escaped a numeric operation.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// A training objective became non-finite.
    #[error("training diverged at step {step}: {objective} is not finite")]
    Divergence { step: u64, objective: &'static str },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end:
    /// 1 usage, 2 data/format, 3 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Dimension(_) | Error::Input(_) | Error::Format { .. } | Error::Io { .. } => 2,
            Error::NonFinite(_) | Error::Divergence { .. } => 3,
        }
    }
}
