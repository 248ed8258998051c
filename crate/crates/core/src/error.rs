use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum VfdError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("label {label} out of range 0..{n_classes}")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("class {class} has {available} items, needs {required}")]
    InsufficientItems {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("unknown {kind}: {value}")]
    Unknown { kind: &'static str, value: String },

    #[error("non-finite loss term {term} = {value}")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl VfdError {
    /// Short machine-parsable category used for CLI exit diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            VfdError::InvalidConfig(_) => "config",
            VfdError::ShapeMismatch { .. } | VfdError::LengthMismatch { .. } => "shape",
            VfdError::LabelOutOfRange { .. } => "label",
            VfdError::EmptyInput(_) | VfdError::InsufficientItems { .. } => "data",
            VfdError::Degenerate(_) => "degenerate",
            VfdError::Parse { .. } => "parse",
            VfdError::Unknown { .. } => "unknown",
            VfdError::NonFiniteLoss { .. } => "numeric",
            VfdError::Factorization(_) => "numeric",
            VfdError::Version { .. } => "version",
            VfdError::Io(_) => "io",
            VfdError::Serde(_) => "serde",
        }
    }
}

pub type Result<T> = std::result::Result<T, VfdError>;

pub(crate) fn shape_err(expected: impl std::fmt::Debug, found: impl std::fmt::Debug) -> VfdError {
    VfdError::ShapeMismatch {
        expected: format!("{expected:?}"),
        found: format!("{found:?}"),
    }
}
