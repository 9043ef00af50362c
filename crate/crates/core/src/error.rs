use std::path::PathBuf;

use thiserror::Error;

use crate::datamodel::TaskKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes or structural preconditions do not hold.
    #[error("shape error: {0}")]
    Shape(String),

    /// A precondition on values (not shapes) failed.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}{}: {msg}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Data {
        path: PathBuf,
        line: Option<usize>,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("task mismatch: checkpoint was trained for {checkpoint}, run requested {requested}")]
    TaskMismatch {
        checkpoint: TaskKind,
        requested: TaskKind,
    },

    /// Non-finite loss or gradient, or a failed numerical check.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn data(
        path: impl Into<PathBuf>,
        line: Option<usize>,
        msg: impl Into<String>,
    ) -> Self {
        Error::Data {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::TaskMismatch { .. } => 5,
            Error::Data { .. } | Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
            // Structural failures surface from malformed data in practice.
            Error::Shape(_) | Error::Invalid(_) => 3,
        }
    }
}
