use std::path::PathBuf;

/// Errors produced anywhere in the valuation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("models do not share a configuration")]
    ConfigMismatch,

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("training set of {size} pairs exceeds the leave-one-out cap of {cap}")]
    OracleCapExceeded { size: usize, cap: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate variance in correlation input")]
    DegenerateVariance,

    #[error("missing field `{field}` on pair `{id}`")]
    MissingField { id: String, field: &'static str },

    #[error("duplicate pair id `{0}`")]
    DuplicateId(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("could not generate distinct responses after {0} attempts")]
    Degenerate(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
