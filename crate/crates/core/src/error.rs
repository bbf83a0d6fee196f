use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("graph is empty: {0}")]
    EmptyGraph(String),
    #[error("unknown entity id {0}")]
    UnknownEntity(u32),
    #[error("unknown relation id {0}")]
    UnknownRelation(u32),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("entity {0} has no incident triples")]
    EmptySubGraph(u32),
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("backward: {0}")]
    Backward(String),
    #[error("sequence: {0}")]
    Sequence(String),
    #[error("model: {0}")]
    Model(String),
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("task data: {0}")]
    TaskData(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Numeric(_) => ErrorClass::Numeric,
            Error::Parse { .. }
            | Error::EmptyGraph(_)
            | Error::UnknownEntity(_)
            | Error::UnknownRelation(_)
            | Error::UnknownLabel(_)
            | Error::EmptySubGraph(_)
            | Error::Checkpoint(_)
            | Error::TaskData(_)
            | Error::Io { .. } => ErrorClass::Data,
            Error::Shape { .. } | Error::Backward(_) | Error::Sequence(_) | Error::Model(_) => {
                ErrorClass::Internal
            }
        }
    }
}
