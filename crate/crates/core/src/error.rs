use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient columns: {classes} classes requested but the construction has {available}")]
    InsufficientColumns { classes: usize, available: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("feature dimension too small: {features} features for {classes} classes")]
    FeatureDimTooSmall { features: usize, classes: usize },

    #[error("gram factorization failure at pivot {index} (value {value:e})")]
    GramFactorization { index: usize, value: f64 },

    #[error("need at least two classes")]
    TooFewClasses,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid loss config: {0}")]
    InvalidLossConfig(String),

    #[error("invalid attack config: {0}")]
    InvalidAttackConfig(String),

    #[error("bad magic in {what}: expected {expected}, found {found}")]
    BadMagic {
        what: String,
        expected: String,
        found: String,
    },

    #[error("truncated {0}")]
    Truncated(String),

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("dataset has {available} samples, {requested} requested")]
    NotEnoughSamples { requested: usize, available: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: String, reason: String },

    #[error("hash mismatch for {what}: expected {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
