use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("tensor file magic mismatch: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: String, found: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite feature value {value} at flat index {index} (example {example}, head {head}, dim {dim})")]
    NonFiniteValue {
        index: usize,
        example: usize,
        head: usize,
        dim: usize,
        value: f32,
    },

    #[error("label {label} of example {example} is outside [0, {num_classes})")]
    LabelOutOfRange {
        example: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("feature set has no labels")]
    MissingLabels,

    #[error("class {class} ({name}) has no training examples")]
    EmptyClass { class: usize, name: String },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("NonPositiveTau: {name} must be > 0, got {value}")]
    NonPositiveTau { name: &'static str, value: f64 },

    #[error("training set is empty")]
    EmptyTrainSet,

    #[error("head selection is empty")]
    EmptySelection,

    #[error("at least two classes are required, got {0}")]
    SingleClass(usize),

    #[error("pseudo-label threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),

    #[error("class {class} ({name}) has no surviving pseudo-labels")]
    ClassVanished { class: usize, name: String },

    #[error("unknown example id {0:?}")]
    UnknownExample(String),

    #[error("unknown class name {0:?}")]
    UnknownClass(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed rollout file {path} line {line}: {message}")]
    Rollout {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user-supplied configuration rather than bad data.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::NonPositiveTau { .. } | Error::InvalidThreshold(_) | Error::InvalidConfig(_)
        )
    }
}
