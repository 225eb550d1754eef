use std::path::PathBuf;

use thiserror::Error;

use crate::dataset::Split;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("gradient check: {0}")]
    GradCheck(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    Wav { path: PathBuf, msg: String },

    #[error("keyword directory `{keyword}` not found under {}", root.display())]
    MissingKeyword { keyword: String, root: PathBuf },

    #[error("split `{0}` has no entries")]
    EmptySplit(Split),

    #[error("noise bank is empty")]
    EmptyNoiseBank,

    #[error("split `{split}` has {available} eligible classes, episode needs {needed}")]
    InsufficientClasses {
        split: Split,
        needed: usize,
        available: usize,
    },

    #[error("class `{class}` has {available} samples, episode needs {needed}")]
    InsufficientSamples {
        class: String,
        needed: usize,
        available: usize,
    },

    #[error("manifest line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("scores: {0}")]
    Scores(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "non-finite training loss at epoch {epoch}, episode {episode} (episode seed {seed:#018x})"
    )]
    Diverged {
        epoch: usize,
        episode: usize,
        seed: u64,
    },
}

/// Coarse failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite { .. }
            | Error::Backward(_)
            | Error::GradCheck(_)
            | Error::Diverged { .. } => ErrorKind::Numerical,
            Error::Config(_) | Error::Shape { .. } | Error::Scores(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
