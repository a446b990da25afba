use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the ranking pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("function is not deterministic: {first} != {second}")]
    NonDeterministicFunction { first: f64, second: f64 },

    #[error("unknown parameter `{0}`")]
    MissingParam(String),

    #[error("malformed plan document: {0}")]
    MalformedDocument(String),

    #[error("structural error at {path}: {detail}")]
    StructuralError { path: String, detail: String },

    #[error("range error at {path}: {detail}")]
    RangeError { path: String, detail: String },

    #[error("plan {0} has no latency runs")]
    EmptyRuns(usize),

    #[error("plan {0} has a non-finite or negative latency")]
    NonFiniteLatency(usize),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("need at least 2 queries to split, got {0}")]
    TooFewQueries(usize),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("candidate list of {len} plans exceeds capacity {max}")]
    ListTooLong { len: usize, max: usize },

    #[error("score matrix contains non-finite values")]
    NonFiniteScores,

    #[error("ground-truth positions are not a permutation of 1..={0}")]
    InvalidRanks(usize),

    #[error("loss diverged at epoch {epoch}, query {query_id}: {loss}")]
    DivergedLoss {
        epoch: usize,
        query_id: String,
        loss: f64,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("need at least {need} in-distribution examples, got {got}")]
    TooFewExamples { need: usize, got: usize },

    #[error("empty set: {0}")]
    EmptySet(&'static str),

    #[error("detector thresholds are degraded (calibration overlap); pass force to override")]
    DegradedDetector,

    #[error("k = {k} out of range 1..={n}")]
    KOutOfRange { k: usize, n: usize },

    #[error("no candidate set for query `{0}`")]
    MissingQuery(String),

    #[error("embedder mismatch: checkpoint has `{checkpoint}`, requested `{requested}`")]
    EmbedderMismatch { checkpoint: String, requested: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse grouping used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Data,
    Model,
    Config,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            VersionMismatch { .. }
            | CorruptFile(_)
            | MissingParam(_)
            | EmbedderMismatch { .. }
            | DegradedDetector
            | DivergedLoss { .. }
            | DimensionMismatch { .. }
            | ShapeMismatch { .. }
            | NonDeterministicFunction { .. } => ErrorKind::Model,
            InvalidConfig(_) | KOutOfRange { .. } => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
