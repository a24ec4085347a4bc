use std::path::PathBuf;

/// Errors produced by the stitching pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("decode failure: {0}")]
    Decode(String),
    #[error("unsupported image: {0}")]
    Unsupported(String),
    #[error("zero-sized image")]
    EmptyImage,
    #[error("no tissue found")]
    NoTissue,
    #[error("empty mask")]
    EmptyMask,
    #[error("fragment too small")]
    FragmentTooSmall,
    #[error("fragment boundary too short for neighborhood: {frames} frames, need {needed}")]
    BoundaryTooShort { frames: usize, needed: usize },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate sample")]
    DegenerateSample,
    #[error("no consensus: best model has {best} inliers, need {required}")]
    NoConsensus { best: usize, required: usize },
    #[error("empty fragment pool")]
    EmptyPool,
    #[error("canvas too large: {width}x{height} exceeds budget of {budget} pixels")]
    CanvasTooLarge { width: usize, height: usize, budget: u64 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("encoder bridge failed: {0}")]
    Bridge(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
