use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("backward requires a scalar output, found shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("graph has no designated output")]
    NoOutput,

    #[error("label {label} at pixel {pixel} is outside [0, {classes})")]
    LabelOutOfRange {
        label: usize,
        pixel: usize,
        classes: usize,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("modality {index} out of range for {modalities} modalities")]
    ModalityOutOfRange { index: usize, modalities: usize },

    #[error("training diverged in {phase} at epoch {epoch}: non-finite loss")]
    Divergence { phase: String, epoch: usize },

    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    #[error("malformed file header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("empty sequence: {0}")]
    Empty(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("in cell {cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(node: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            node: node.into(),
            detail: detail.into(),
        }
    }

    /// Whether this is a usage/configuration problem (exit code 2) rather
    /// than an internal or numeric failure (exit code 1).
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Config(_) | Error::Json(_) | Error::ModalityOutOfRange { .. } => true,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Cell { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}
