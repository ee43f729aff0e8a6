use std::path::PathBuf;

/// Errors raised by the keypoint pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),

    #[error("matrix is not a proper rotation: {0}")]
    NotRigid(String),

    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("cloud has {got} points but the neighbourhood needs {needed}")]
    CloudTooSmall { needed: usize, got: usize },

    #[error("layer {layer} out of range 1..={layers}")]
    BadLayerIndex { layer: usize, layers: usize },

    #[error("covariance is degenerate (all rows identical)")]
    DegenerateCovariance,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("saliency scores must be normalized before use")]
    UnnormalizedSaliency,

    #[error("requested {k} keypoints from a cloud of {n} points")]
    KTooLarge { k: usize, n: usize },

    #[error("histogram is empty")]
    EmptyHistogram,

    #[error("keypoint set is empty")]
    EmptyKeypointSet,

    #[error("only {0} putative matches, at least 3 required")]
    TooFewMatches(usize),

    #[error("no results to aggregate")]
    EmptyInput,

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("malformed record at line {line}: {msg}")]
    MalformedRecord { line: usize, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("pair {pair}: {source}")]
    Pair {
        pair: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_pair(self, pair: impl Into<String>) -> Self {
        Error::Pair {
            pair: pair.into(),
            source: Box::new(self),
        }
    }
}
