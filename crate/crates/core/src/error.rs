use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    Numeric(String),
    #[error("input is not valid UTF-8: {0}")]
    Encoding(#[from] std::str::Utf8Error),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("cannot split {len} items into {shards} shards")]
    Shard { len: usize, shards: usize },
    #[error("hypothesis/reference count mismatch: {hyps} vs {refs}")]
    Align { hyps: usize, refs: usize },
    #[error("self-BLEU needs at least two systems, got {0}")]
    Arity(usize),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("token id {id} outside vocabulary of size {size}")]
    Vocab { id: usize, size: usize },
    #[error("decoder state mismatch: {0}")]
    State(String),
    #[error("ensemble members disagree: {0}")]
    Ensemble(String),
    #[error("training diverged at step {step} (loss {loss})")]
    TrainingDiverged { step: usize, loss: f64 },
    #[error("empty candidate set for source {0}")]
    Candidate(usize),
    #[error("model pool error: {0}")]
    Pool(String),
    #[error("model is not usable for this stage: {0}")]
    ModelState(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {cause}")]
    Stage { stage: String, cause: Box<Error> },
    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Path { path, source }
    }
}
