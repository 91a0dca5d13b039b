use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parameter shape mismatch: expected {expected} got {got} ({what})")]
    ParamShape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("container format error: {0}")]
    Format(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("non-finite loss `{name}` at step {step}")]
    NonFinite { name: String, step: u64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
