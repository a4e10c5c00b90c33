use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("numeric: {0}")]
    Num(#[from] numcore::Error),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("format error in {path} at byte {offset}: {what}")]
    Format {
        path: PathBuf,
        offset: u64,
        what: String,
    },

    #[error("{op}: shape error: {what}")]
    Shape { op: &'static str, what: String },

    #[error("stats error: {0}")]
    Stats(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, what: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            what: what.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
