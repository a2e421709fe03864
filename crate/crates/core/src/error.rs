use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid class space: {0}")]
    InvalidClassSpace(String),

    #[error("class index {class} out of range for {m} classes")]
    ClassOutOfRange { class: usize, m: usize },

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("corrupt annotation: pixel labeled {class} but annotated classes are {annotated:?}")]
    CorruptAnnotation { class: u8, annotated: Vec<usize> },

    #[error("invalid probability {value} at channel {index}")]
    InvalidProbability { index: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no sample annotated with conditional class {class} ({name})")]
    MissingConditionalClass { class: usize, name: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at stage {stage}, step {step} (seed {seed}, batch {batch:?})")]
    NonFiniteLoss {
        stage: u8,
        step: usize,
        seed: u64,
        batch: Vec<usize>,
    },

    #[error("dataset record {record}: {reason}")]
    Record { record: String, reason: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png decode error at {path}: {source}")]
    PngDecode {
        path: PathBuf,
        #[source]
        source: png::DecodingError,
    },

    #[error("png encode error at {path}: {source}")]
    PngEncode {
        path: PathBuf,
        #[source]
        source: png::EncodingError,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user-supplied configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidClassSpace(_) | Error::ClassOutOfRange { .. }
        )
    }
}
