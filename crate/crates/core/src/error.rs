use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("batch norm running statistics are uninitialized ({0})")]
    UninitializedStats(String),

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("scale {scale} out of range for field of length {len}")]
    Scale { scale: usize, len: usize },

    #[error("degenerate statistics: {0}")]
    DegenerateStatistics(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("range error: {0}")]
    Range(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("spec hash mismatch: stored model spec does not match its recorded hash")]
    SpecHash,

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite loss at epoch {epoch}; diagnostic checkpoint at {}", checkpoint.display())]
    NonFiniteLoss { epoch: usize, checkpoint: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
