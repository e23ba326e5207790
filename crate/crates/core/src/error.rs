use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("non-finite value in parameter {param} at coordinate {index}")]
    NonFinite { param: usize, index: usize },

    #[error("invalid configuration at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{stage}: training diverged (non-finite loss) at step {step}")]
    Divergence { stage: String, step: usize },

    #[error("frozen parameter `{name}` was mutated during {stage}")]
    Integrity { stage: String, name: String },

    #[error("stage mismatch: expected {expected}, found {found}")]
    Stage { expected: String, found: String },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("adapter already attached to `{0}`")]
    DuplicateAdapter(String),

    #[error("rank {rank} exceeds min(d, k) = {bound} for `{name}`")]
    RankTooLarge {
        name: String,
        rank: usize,
        bound: usize,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("bad magic bytes {0:?}, not a checkpoint")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error in {context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into().display().to_string(),
            source,
        }
    }

    pub fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            context: path.into().display().to_string(),
            source,
        }
    }

    /// True for errors caused by user configuration rather than a training fault.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Json { .. }
                | Error::RankTooLarge { .. }
                | Error::DuplicateAdapter(_)
                | Error::Stage { .. }
        )
    }
}
