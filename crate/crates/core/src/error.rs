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

    #[error("malformed image header: {0}")]
    MalformedHeader(String),

    #[error("truncated image payload: expected {expected} samples, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("image is not 8-bit grayscale: {0}")]
    NotGrayscale(String),

    #[error("png decode/encode failure: {0}")]
    Png(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("mask has no pixel inside the region of interest")]
    EmptyMask,

    #[error("image of {height}x{width} exceeds the reference reduction limit of {limit}x{limit}")]
    TooLargeForOracle {
        height: usize,
        width: usize,
        limit: usize,
    },

    #[error("invalid augmentation parameter: {0}")]
    InvalidParameter(String),

    #[error("calibration corpus is empty")]
    EmptyCorpus,

    #[error("invalid calibration setting: {0}")]
    InvalidCalibration(String),

    #[error("no combination is calibratable for the {band} band; measured median ranges: {measured}")]
    Uncalibratable { band: String, measured: String },

    #[error("calibration table has no usable combination for the {0} band")]
    EmptyBand(String),

    #[error("persistence diagram parse error: {0}")]
    DiagramParse(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
