use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// A malformed record in a dataset or artifact file.
    #[error("{}:{line}: field `{field}`: {msg}", path.display())]
    Row {
        path: PathBuf,
        line: usize,
        field: String,
        msg: String,
    },

    #[error("unknown label {0:?} (allowed labels: low, moderate, severe)")]
    UnknownLabel(String),

    #[error("duplicate post id {0:?}")]
    DuplicateId(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("model file {}: {msg}", path.display())]
    Model { path: PathBuf, msg: String },

    #[error("backend {backend}: {msg}")]
    Backend { backend: String, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse failure class, used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Backend,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn row(
        path: impl Into<PathBuf>,
        line: usize,
        field: impl Into<String>,
        msg: impl Into<String>,
    ) -> Self {
        Error::Row {
            path: path.into(),
            line,
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn backend(backend: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Backend {
            backend: backend.into(),
            msg: msg.into(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Backend { .. } => ErrorClass::Backend,
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
