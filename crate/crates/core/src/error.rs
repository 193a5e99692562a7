use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty segment list")]
    EmptySegments,
    #[error("invalid segment {index}: {reason}")]
    InvalidSegment { index: usize, reason: String },
    #[error("non-positive image dimensions {width}x{height}")]
    NonPositiveDimensions { width: i64, height: i64 },
    #[error("shape mismatch in {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("zero-variance row {row} in layernorm input")]
    ZeroVariance { row: usize },
    #[error("head dimension {0} must be even for rotary embedding")]
    OddHeadDim(usize),
    #[error("gate value {value} for token {token} outside (0, 1)")]
    GateOutOfRange { token: usize, value: f64 },
    #[error("missing cached activations: {0}")]
    MissingCache(&'static str),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("visual features do not match image slots: {0}")]
    FeatureMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("workload needs {needed} floats, budget is {budget}")]
    MemoryBudget { needed: u64, budget: u64 },
    #[error("empty report set")]
    EmptyReports,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(what: &str, expected: &[usize], got: &[usize]) -> Error {
    Error::ShapeMismatch {
        what: what.to_string(),
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}
