//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    Shape { op: &'static str, details: String },

    #[error("degenerate input in {op}: {details}")]
    DegenerateInput { op: &'static str, details: String },

    #[error("invalid parameter {name}: {details}")]
    InvalidParameter { name: &'static str, details: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("sequence length {len} exceeds maximum context {t_max}")]
    ContextOverflow { len: usize, t_max: usize },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("trait pole starved: partition for {0} is empty")]
    StarvedPole(String),

    #[error("training diverged at stage {stage} step {step}: loss {loss}")]
    Divergence { stage: String, step: usize, loss: f64 },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("failed to parse generator output ({reason}); raw text follows:\n{raw}")]
    ParseCompletion { reason: String, raw: String },

    #[error("checkpoint corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
