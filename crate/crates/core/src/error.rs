use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus file not found: {0}")]
    MissingFile(PathBuf),
    #[error("style subset {style} is empty")]
    EmptySubset { style: usize },
    #[error("expected {expected} style files, got {got}")]
    StyleCount { expected: usize, got: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence of {len} tokens exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("unknown document id {0}")]
    UnknownDoc(usize),
    #[error("style index {style} out of range for {count} styles")]
    StyleOutOfRange { style: usize, count: usize },
    #[error("zero-norm query embedding")]
    ZeroQuery,
    #[error("dense index is empty")]
    EmptyIndex,
    #[error("invalid config key `{0}`")]
    ConfigKey(String),
    #[error("invalid value for config key `{key}`: {value}")]
    ConfigValue { key: String, value: String },
    #[error("{0}")]
    Format(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("candidate and reference lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("perplexity {0} must exceed 1 for the geometric mean")]
    PerplexityTooLow(f64),
    #[error("classifier has {classifier} classes but {styles} styles requested")]
    ClassCount { classifier: usize, styles: usize },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("output path {0} exists; pass --force to overwrite")]
    Exists(PathBuf),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
