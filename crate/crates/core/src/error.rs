use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("corpus too small: {len} tokens, need at least 3")]
    CorpusTooSmall { len: usize },

    #[error("vocab file line {line}: {message}")]
    VocabParse { line: usize, message: String },

    #[error("duplicate token {token:?} at vocab file line {line}")]
    DuplicateToken { token: String, line: usize },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("context length mismatch: order {order} needs {expected} tokens, got {got}")]
    ContextLength { order: usize, expected: usize, got: usize },

    #[error("bad prior file: {0}")]
    PriorFormat(String),

    #[error("unsupported prior format version {found} (expected {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },

    #[error("vocabulary fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("prior file truncated")]
    Truncated,

    #[error("transport failure: {0}")]
    Transport(#[source] std::io::Error),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("remote provider error: {0}")]
    Remote(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown {kind} {name:?} (available: {available})")]
    UnknownStrategy { kind: &'static str, name: String, available: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty generation")]
    EmptyGeneration,

    #[error("record lacks distributions")]
    MissingDistributions,

    #[error("non-finite probability distribution")]
    NonFiniteDistribution,

    #[error("empty input")]
    EmptyInput,

    #[error("sweep interrupted after {completed} cells")]
    Interrupted { completed: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
