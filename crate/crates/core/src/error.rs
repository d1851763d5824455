use std::path::PathBuf;

use thiserror::Error;

/// Every failure the toolkit can report.
///
/// The variants are grouped by how a caller is expected to react: malformed
/// input documents ([`Error::Parse`], [`Error::Format`], [`Error::Io`]),
/// structurally inconsistent graphs and tensors ([`Error::Dimension`],
/// [`Error::Shape`], [`Error::Validation`], [`Error::Structure`]), and
/// compression passes that cannot be applied ([`Error::Alignment`],
/// [`Error::Merge`]). See [`ErrorClass`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse {
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("validation error at node #{index} `{node}`: {msg}")]
    Validation {
        index: usize,
        node: String,
        msg: String,
    },

    #[error("shape error at `{node}`: {msg}")]
    Shape { node: String, msg: String },

    #[error("structure mismatch: {0}")]
    Structure(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("merge error at `{node}`: {msg}")]
    Merge { node: String, msg: String },

    #[error("unknown node `{0}`")]
    Lookup(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse grouping of [`Error`] variants, stable enough to map onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Unreadable or malformed input documents and files.
    Parse,
    /// Shape, dimension and graph-structure inconsistencies.
    Shape,
    /// A compression pass refused to run.
    Pass,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Parse { .. }
            | Error::Format { .. }
            | Error::Io { .. }
            | Error::Usage(_)
            | Error::Validation { .. } => ErrorClass::Parse,
            Error::Alignment(_) | Error::Merge { .. } => ErrorClass::Pass,
            Error::Dimension(_)
            | Error::Range(_)
            | Error::Shape { .. }
            | Error::Structure(_)
            | Error::Lookup(_) => ErrorClass::Shape,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(node: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Shape {
            node: node.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
