use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("quantile level must lie strictly inside (0, 1), got {0}")]
    InvalidLevel(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("weights must be nonnegative and sum to 1 (sum = {0})")]
    NotASimplex(f64),

    #[error("degenerate weights: {0}")]
    DegenerateWeights(&'static str),

    #[error("instance exceeds exact-solver scale: {n} x {m} > {limit}")]
    OracleScale { n: usize, m: usize, limit: usize },

    #[error("value {value} outside invertible range [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("flow training diverged at epoch {epoch} (last finite epoch {last_good})")]
    TrainingDiverged { epoch: usize, last_good: usize },

    #[error("quantile regression diverged: {0}")]
    RegressorDiverged(String),

    #[error("classifier degenerate: {0}")]
    DegenerateClassifier(&'static str),

    #[error("insufficient data: need {needed}, have {have} ({context})")]
    InsufficientData {
        needed: usize,
        have: usize,
        context: &'static str,
    },

    #[error("csv schema error: {0}")]
    CsvSchema(String),

    #[error("csv parse error at row {row}: {message}")]
    CsvParse { row: usize, message: String },

    #[error("checkpoint file corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version mismatch: file has {found}, supported {supported}")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("model variant requires {0}")]
    MissingVariantInput(&'static str),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
