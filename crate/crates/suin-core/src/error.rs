//! Error type shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric domain: {0}")]
    NumericDomain(String),

    #[error("attention over an all-masked sequence")]
    EmptyAttention,

    #[error("row index {index} out of range for table with {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },

    #[error("backward already ran on this graph; build a new graph per step")]
    BackwardAlreadyRan,

    #[error("training diverged: non-finite gradient for parameter `{param}` at {context}")]
    Divergence { param: String, context: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data leakage: {0}")]
    Leakage(String),

    #[error("similarity undefined: {0}")]
    UndefinedSimilarity(String),

    #[error("AUC undefined: all labels are {0}")]
    AucUndefined(u8),

    #[error("user {0} has an empty behavior history")]
    EmptyHistory(u64),

    #[error("internal consistency: {0}")]
    Internal(String),

    #[error("missing artifact {path}: run `{hint}` first")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
