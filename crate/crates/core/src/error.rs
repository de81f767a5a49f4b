use thiserror::Error;

/// Errors raised by the calibration toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("record {id:?}: expected exactly one uncertainty representation, found {found}")]
    MissingUncertainty { id: String, found: usize },

    #[error("record {id:?}: field `{field}` is not finite")]
    NonFinite { id: String, field: String },

    #[error("record {id:?}: sigma must be > 0, got {value}")]
    NonPositiveSigma { id: String, value: f64 },

    #[error("record {id:?}: deltas must be >= 0, got ({lo}, {hi})")]
    NegativeDelta { id: String, lo: f64, hi: f64 },

    #[error("need at least 2 samples, got {0}")]
    EmptySamples(usize),

    #[error("record {0:?}: ground truth `y` is required here")]
    MissingGroundTruth(String),

    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),

    #[error("delta must be > 0, got {0}")]
    NonPositiveDelta(f64),

    #[error("score must be finite and >= 0, got {0}")]
    InvalidScore(f64),

    #[error("uncertainty of record {id:?} is incompatible with {kind} scoring")]
    KindMismatch { id: String, kind: &'static str },

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("group {group:?} has {have} records, need {need}")]
    InsufficientGroupData { group: String, have: usize, need: usize },

    #[error("duplicate record id {0:?}")]
    DuplicateId(String),

    #[error("min_bin_size {min_bin_size} gives an infinite bin quantile at alpha {alpha}; need >= {need}")]
    MinBinTooSmall { min_bin_size: usize, alpha: f64, need: usize },

    #[error("record {id:?} lacks binning attribute {attribute:?}")]
    MissingAttribute { id: String, attribute: String },

    #[error("unknown group(s) with no fallback quantile: {0:?}")]
    UnknownGroup(Vec<String>),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("empty input")]
    Empty,

    #[error("record {0:?}: asymmetric uncertainty has no Gaussian sigma")]
    UnsupportedUncertainty(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("tau must lie in (0, 1), got {0}")]
    InvalidTau(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("training diverged at epoch {0} (non-finite loss); lower the learning rate")]
    NonFiniteLoss(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("model parse error: {0}")]
    ModelFormat(String),
}

pub type Result<T> = std::result::Result<T, Error>;
