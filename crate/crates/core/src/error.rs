use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which span list an out-of-range error refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanKind {
    Source,
    Target,
}

impl std::fmt::Display for SpanKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SpanKind::Source => f.write_str("source"),
            SpanKind::Target => f.write_str("target"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("sources {first} and {second} overlap or are out of order")]
    OverlappingSources { first: usize, second: usize },

    #[error("{kind} span {index} = [{start}, {end}) is out of range for length {len}")]
    SpanOutOfRange {
        kind: SpanKind,
        index: usize,
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("example has no attribution targets")]
    EmptyTargets,

    #[error("empty token sequence")]
    EmptySequence,

    #[error("token {token} at position {position} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfVocab {
        position: usize,
        token: u32,
        vocab_size: usize,
    },

    #[error("sequence of length {len} exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("log-probability {0} is outside the domain (must be <= 0)")]
    DomainError(f64),

    #[error("backend does not support this operation: {0}")]
    BackendUnsupported(String),

    #[error("no recorded ablation {bits} for example {id:?}, target {target}")]
    UnrecordedAblation {
        id: String,
        target: usize,
        bits: String,
    },

    #[error("unknown example id {0:?}")]
    UnknownExample(String),

    #[error("target index {index} out of range ({count} targets)")]
    NoSuchTarget { index: usize, count: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("format error in {path} at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Variant name, e.g. `"UnrecordedAblation"`.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::OverlappingSources { .. } => "OverlappingSources",
            Error::SpanOutOfRange { .. } => "SpanOutOfRange",
            Error::EmptyTargets => "EmptyTargets",
            Error::EmptySequence => "EmptySequence",
            Error::TokenOutOfVocab { .. } => "TokenOutOfVocab",
            Error::TooLong { .. } => "TooLong",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::InvalidInput(_) => "InvalidInput",
            Error::DomainError(_) => "DomainError",
            Error::BackendUnsupported(_) => "BackendUnsupported",
            Error::UnrecordedAblation { .. } => "UnrecordedAblation",
            Error::UnknownExample(_) => "UnknownExample",
            Error::NoSuchTarget { .. } => "NoSuchTarget",
            Error::EmptyDataset => "EmptyDataset",
            Error::Format { .. } => "FormatError",
            Error::Io { .. } => "IoError",
            Error::Json { .. } => "JsonError",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
