//! Crate-wide error type.

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

    #[error("malformed ppm header: {0}")]
    PpmHeader(String),

    #[error("truncated ppm payload: expected {expected} bytes, found {found}")]
    PpmTruncated { expected: usize, found: usize },

    #[error("unsupported ppm maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),

    #[error("failed to decode {path}: {detail}")]
    ImageDecode { path: PathBuf, detail: String },

    #[error("invalid image data: {0}")]
    InvalidImage(String),

    #[error("manifest header must be exactly `id,path,label,split`")]
    ManifestHeader,

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("unknown label `{0}` (expected benign|malignant)")]
    UnknownLabel(String),

    #[error("unknown split `{0}` (expected train|validation|test)")]
    UnknownSplit(String),

    #[error("missing file for sample `{id}`: {path}")]
    MissingFile { id: String, path: PathBuf },

    #[error("record `{id}`: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid range: lo {lo} > hi {hi}")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("unknown stream tag `{0}`")]
    UnknownStreamTag(String),

    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid generator config: {0}")]
    InvalidSynthConfig(String),

    #[error("no lesion found (largest component below threshold)")]
    NoLesion,

    #[error("empty mask")]
    EmptyMask,

    #[error("sample too small: need at least {min} values per side, got {a} and {b}")]
    SampleTooSmall { min: usize, a: usize, b: usize },

    #[error("both classes must be present")]
    OneClassOnly,

    #[error("shape mismatch at layer {layer}: {detail}")]
    ShapeMismatch { layer: usize, detail: String },

    #[error("invalid model config: {0}")]
    InvalidModelConfig(String),

    #[error("invalid model file: {0}")]
    InvalidModelFile(String),

    #[error("split `{0}` is empty")]
    EmptySplit(String),
}

impl Error {
    /// Wraps an error with the id of the record being processed.
    pub fn for_record(id: &str, source: Error) -> Error {
        Error::Record {
            id: id.to_string(),
            source: Box::new(source),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
