use std::path::PathBuf;

use thiserror::Error;

use crate::model::{ImageId, LabelId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box has non-positive extent (w = {w}, h = {h})")]
    Degenerate { w: f64, h: f64 },
    #[error("box has non-finite coordinates ({x}, {y}, {w}, {h})")]
    NonFinite { x: f64, y: f64, w: f64, h: f64 },
}

/// Coarse error families, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Schema,
    State,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: JSON parse error at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("annotation {annotation_id}: invalid bbox: {source}")]
    InvalidBox {
        annotation_id: LabelId,
        #[source]
        source: GeometryError,
    },
    #[error("annotation {annotation_id}: {message}")]
    InvalidAnnotation { annotation_id: LabelId, message: String },
    #[error("image {image_id}: {message}")]
    InvalidImage { image_id: ImageId, message: String },
    #[error("image {0} is not covered by the clean dataset")]
    MissingImage(ImageId),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("external detector command failed with {status}: {stderr}")]
    CommandFailed { status: String, stderr: String },
    #[error("external detector produced no output at {0}")]
    MissingOutput(PathBuf),
    #[error("{} unresolved review items, starting with {:?}", .0.len(), &.0[..(.0.len().min(10))])]
    Unresolved(Vec<u64>),
    #[error("unknown review item {0}")]
    UnknownItem(u64),
    #[error("review item {item_id}: {message}")]
    InvalidDecision { item_id: u64, message: String },
    #[error("corrupt checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("{0}")]
    State(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } | Error::MissingOutput(_) | Error::CommandFailed { .. } => ErrorKind::Io,
            Error::Parse { .. }
            | Error::InvalidBox { .. }
            | Error::InvalidAnnotation { .. }
            | Error::InvalidImage { .. } => ErrorKind::Schema,
            Error::Config(_) => ErrorKind::Config,
            Error::MissingImage(_)
            | Error::Unresolved(_)
            | Error::UnknownItem(_)
            | Error::InvalidDecision { .. }
            | Error::Checkpoint { .. }
            | Error::State(_) => ErrorKind::State,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, err: &serde_json::Error) -> Self {
        Error::Parse {
            path: path.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
