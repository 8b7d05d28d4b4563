use std::path::PathBuf;

use thiserror::Error;

/// Coarse failure classes; the CLI maps each to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Parse,
    Validation,
    Numeric,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Parse => 2,
            ErrorClass::Validation => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Io => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("node `{node}` references missing weight `{weight}`")]
    DanglingWeight { node: String, weight: String },
    #[error("graph contains a cycle through node `{0}`")]
    Cycle(String),
    #[error("shape conflict at node `{node}`: {message}")]
    ShapeConflict { node: String, message: String },
    #[error("graph input `{0}` is not bound")]
    MissingInput(String),
    #[error("scheme mismatch: {0}")]
    SchemeMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Parse { .. } => ErrorClass::Parse,
            Error::Numeric(_) | Error::NonFinite { .. } => ErrorClass::Numeric,
            Error::Io { .. } => ErrorClass::Io,
            Error::Layer { source, .. } => source.class(),
            _ => ErrorClass::Validation,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn in_layer(self, layer: &str) -> Self {
        Error::Layer {
            layer: layer.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
