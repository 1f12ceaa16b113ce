use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input. `location` is a 1-based line for text formats and a
    /// byte offset for binary ones.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("usage error: {0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn parse_line(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            location: format!("line {line}"),
            message: msg.into(),
        }
    }

    pub(crate) fn parse_offset(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            location: format!("byte offset {offset}"),
            message: msg.into(),
        }
    }

    /// Process exit code: 2 usage, 3 data, 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Io { .. } | Error::Parse { .. } | Error::Domain(_) => 3,
            Error::Divergence(_) => 4,
        }
    }
}
