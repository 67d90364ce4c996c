use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("image is empty")]
    EmptyImage,

    #[error("image must be single-channel (got {0} channels)")]
    NotGrayscale(usize),

    #[error("bad magic in {0}")]
    BadMagic(String),

    #[error("truncated: {0}")]
    Truncated(String),

    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    #[error("insufficient matches: need at least 4, got {0}")]
    InsufficientMatches(usize),

    #[error("no homography with at least {min_inliers} inliers (best had {best})")]
    NoConsensus { min_inliers: usize, best: usize },

    #[error("singular homography")]
    SingularHomography,

    #[error("negative feature value {value} at index {index}")]
    NegativeValue { value: f32, index: usize },

    #[error("trajectory frame {frame} outside stack of length {length}")]
    FrameOutOfRange { frame: u32, length: usize },

    #[error("missing feature map for layer {layer} ({stream}), scale {scale}")]
    MissingGroup {
        stream: String,
        layer: String,
        scale: f64,
    },

    #[error("too few samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("inconsistent normalization flags")]
    InconsistentNormalization,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
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
}

macro_rules! ensure {
    ($cond:expr, $err:expr) => {
        if !$cond {
            return Err($err);
        }
    };
}
pub(crate) use ensure;
