use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("event stream not sorted: event {index} at t={t} precedes t={prev}")]
    Ordering { index: usize, t: u64, prev: u64 },

    #[error("event at ({x}, {y}) outside {width}x{height} sensor")]
    OutOfBounds {
        x: u32,
        y: u32,
        width: usize,
        height: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{}: {source}", path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {source}", path.display())]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }

    pub fn io_at(path: &Path, source: std::io::Error) -> Self {
        Error::IoAt {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Attach the offending file to an error.
    pub fn in_file(self, path: &Path) -> Self {
        match self {
            e @ (Error::InFile { .. } | Error::IoAt { .. }) => e,
            other => Error::InFile {
                path: path.to_path_buf(),
                source: Box::new(other),
            },
        }
    }
}
