use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus not found: {}", .0.display())]
    CorpusNotFound(PathBuf),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("duplicate poem_id `{0}`")]
    DuplicatePoem(String),

    #[error("no poets survive filtering")]
    NothingSurvives,

    #[error("empty verse")]
    EmptyVerse,

    #[error("empty vocabulary")]
    EmptyVocabulary,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{0}")]
    Invalid(String),

    #[error("leakage detected in poems: {}", .0.join(", "))]
    Leakage(Vec<String>),

    #[error("class `{0}` has no training verses")]
    EmptyClass(String),

    #[error("non-finite loss at batch {batch} (lr {lr:e})")]
    NonFiniteLoss { batch: usize, lr: f64 },

    #[error("stale artifact `{name}`: expected hash {expected}, found {found}")]
    StaleArtifact {
        name: String,
        expected: String,
        found: String,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
