use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MargoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: parse error at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0}: file contains no records")]
    EmptyFile(PathBuf),

    #[error("incomplete modality {modality}: no feature row for item `{item}`")]
    IncompleteModality { modality: usize, item: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate dataset: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad binary format: {0}")]
    Format(String),

    #[error("non-finite loss at triplet {index} (user {user}, pos {pos_item}, neg {neg_item})")]
    NonFiniteLoss {
        index: usize,
        user: usize,
        pos_item: usize,
        neg_item: usize,
    },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("config error: {0}")]
    Config(String),
}

impl MargoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        MargoError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is numerical (loss blow-up, gradient check failure)
    /// rather than a problem with the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MargoError::NonFiniteLoss { .. } | MargoError::Diverged(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, MargoError>;
