//! Crate-wide error type.

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("label {label} at row {row} out of range for {parts} parts")]
    LabelOutOfRange {
        label: usize,
        row: usize,
        parts: usize,
    },
    #[error("batch normalization needs at least 2 rows in train mode, got {rows}")]
    DegenerateBatch { rows: usize },
    #[error("parameter '{name}' has no gradient")]
    MissingGradient { name: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("count mismatch: {points} points vs {labels} labels")]
    CountMismatch { points: usize, labels: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown configuration key '{key}'")]
    UnknownConfigKey { key: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("tree error: {0}")]
    Tree(String),
    #[error("unsupported point count {size}, expected one of {expected:?}")]
    UnsupportedSize { size: usize, expected: Vec<usize> },
    #[error("grid error: {0}")]
    Grid(String),
    #[error("point {row} is not normalized: coordinate {value} outside the unit ball")]
    NotNormalized { row: usize, value: f64 },
    #[error("split normal is not unit length: |n| = {norm}")]
    InvalidNormal { norm: f64 },
    #[error("refinement error: {0}")]
    Refinement(String),
    #[error("cannot refine a cell at the finest level ({level})")]
    MaxDepth { level: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numeric check failed: {0}")]
    NumericCheck(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric-check, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownConfigKey { .. } => 2,
            Error::Parse { .. }
            | Error::CountMismatch { .. }
            | Error::Data(_)
            | Error::Io { .. }
            | Error::Checkpoint(_)
            | Error::NotNormalized { .. } => 3,
            Error::NumericCheck(_) => 4,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
