use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("timestamps not strictly increasing at line {line} ({prev} ms then {next} ms)")]
    Ordering { line: usize, prev: i64, next: i64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("numeric failure in {name}: {msg}")]
    Numeric { name: String, msg: String },

    #[error("flow unavailable for frames {src} -> {dst}: {msg}")]
    Flow { src: i64, dst: i64, msg: String },

    #[error("checkpoint/config hash mismatch: checkpoint {checkpoint}, config {config}")]
    HashMismatch { checkpoint: String, config: String },

    #[error("bad container {path:?}: {msg}")]
    Container { path: Option<PathBuf>, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn numeric(name: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric { name: name.into(), msg: msg.into() }
    }

    /// Process exit code: 1 config, 2 numeric, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } => 2,
            Error::Io(_) | Error::Container { .. } | Error::Flow { .. } => 3,
            _ => 1,
        }
    }
}
