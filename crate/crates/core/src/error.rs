use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in dialogue `{id}`: {message}")]
    Parse { id: String, message: String },

    #[error("malformed file {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error("invalid dialogue `{id}`: {message}")]
    Validation { id: String, message: String },

    #[error("invalid knowledge graph: {0}")]
    Graph(String),

    #[error("vocabulary error: {0}")]
    Vocab(String),

    #[error("invalid graph order: {0}")]
    Order(String),

    #[error("sample `{sample_id}` assembles to {len} tokens, over the context limit of {limit}")]
    SequenceTooLong {
        sample_id: String,
        len: usize,
        limit: usize,
    },

    #[error("{stream} index {index} out of range for a table of {size} rows")]
    IndexOutOfRange {
        stream: &'static str,
        index: usize,
        size: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sample `{0}` has an empty response span")]
    EmptyResponse(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("vocabulary hash mismatch: checkpoint expects {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("non-finite loss at step {step} on sample `{sample_id}` (loss = {loss})")]
    Diverged {
        step: usize,
        sample_id: String,
        loss: f64,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
