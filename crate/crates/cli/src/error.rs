use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown experiment kind `{0}` (see --list-kinds)")]
    UnknownKind(String),
    #[error("{kind} run failed: {source}")]
    Run {
        kind: String,
        #[source]
        source: vpb_core::LabError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("serialization: {0}")]
    Serialize(String),
    #[error("cannot compare a {a} record with a {b} record")]
    KindMismatch { a: String, b: String },
}

pub type Result<T> = std::result::Result<T, CliError>;
