use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("episode has no context lines")]
    EmptyEpisode,
    #[error("episode of {lines} lines exceeds {slots} memory slots (enable the inference-time update for long contexts)")]
    EpisodeTooLong { lines: usize, slots: usize },
    #[error("memory read before any write")]
    UninitializedMemory,
    #[error("empty token sequence")]
    EmptyTokens,
    #[error("empty query")]
    EmptyQuery,
    #[error("supporting index {index} out of range for {lines} lines")]
    SupportOutOfRange { index: usize, lines: usize },
    #[error("sample {0} carries no supporting-fact supervision")]
    Unsupervised(String),
    #[error("hop trace has {hops} readouts but {needed} supporting facts")]
    TooFewHops { hops: usize, needed: usize },
    #[error("unsupported sample for this operation: {0}")]
    UnsupportedSample(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at step {step} (samples {samples:?})")]
    NonFiniteLoss { step: usize, samples: Vec<String> },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("dataset line {line}: {source}")]
    Dataset {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
