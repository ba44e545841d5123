use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("duplicate usage id `{0}`")]
    DuplicateUsage(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in vector `{0}`")]
    NonFinite(String),

    #[error("requested {requested} neighbors but only {available} candidates are available")]
    NotEnoughNeighbors { requested: usize, available: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid cost matrix: {0}")]
    InvalidMatrix(String),

    #[error("missing {kind} embedding for `{id}`")]
    MissingEmbedding { kind: &'static str, id: String },

    #[error("invalid prompt template: {0}")]
    Template(String),

    #[error("too few items for {what}: need at least {needed}, got {got}")]
    TooFewItems {
        what: String,
        needed: usize,
        got: usize,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("{0}")]
    Runtime(String),

    #[error("usage ids differ between predictions and gold ({count} offenders), first: {}", .first.join(", "))]
    UsageMismatch { count: usize, first: Vec<String> },

    #[error("definition for `{novel_sense_id}` failed after {attempts} attempt(s): {source}")]
    Generation {
        novel_sense_id: String,
        attempts: u32,
        #[source]
        source: crate::defgen::BackendError,
    },

    #[error("lemma `{lemma}`, stage {stage}: {source}")]
    Stage {
        lemma: String,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn at_stage(self, lemma: &str, stage: &'static str) -> Self {
        Error::Stage {
            lemma: lemma.to_string(),
            stage,
            source: Box::new(self),
        }
    }

    /// True when the error is caused by the inputs (missing or malformed
    /// files, inconsistent data, bad parameters) rather than by a failure
    /// while running.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Generation { .. } | Error::Runtime(_) | Error::InvalidMatrix(_) => false,
            Error::Stage { source, .. } => source.is_input_error(),
            _ => true,
        }
    }
}
