use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty corpus after filtering (min_item_support, min_session_len)")]
    EmptyCorpus,

    #[error("cannot split {count} sessions with an 8:1:1 ratio (need at least 10)")]
    TooFewSessions { count: usize },

    #[error("empty evaluation set")]
    EmptyEvaluation,

    #[error("entmax: {0}")]
    Entmax(String),

    #[error("model: {0}")]
    Model(String),

    #[error("training aborted: non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("checkpoint/corpus mismatch: checkpoint has {checkpoint_items} items, corpus has {corpus_items}")]
    VocabularyMismatch {
        checkpoint_items: usize,
        corpus_items: usize,
    },

    #[error("bad artifact file {path}: {message}")]
    Artifact { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
