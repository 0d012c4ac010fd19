use thiserror::Error;

/// Error type shared across the crate.
///
/// The data-format variants are deliberately distinct (`Format`, `Length`,
/// `Consistency`) so corrupt inputs are diagnosable by kind, not just text.
#[derive(Debug, Error)]
pub enum DegiaError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// Wrong magic number or unrecognized structure in a binary container.
    #[error("format error: {0}")]
    Format(String),

    /// Payload shorter than the header promised.
    #[error("length error: {0}")]
    Length(String),

    /// Structurally valid pieces that disagree with each other.
    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted; the trainer keeps the last good parameter snapshot.
    #[error("training aborted: {0}")]
    TrainAbort(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DegiaError>;

impl DegiaError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DegiaError::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        DegiaError::Contract { op, detail: detail.into() }
    }
}
