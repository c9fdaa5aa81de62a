use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the consensus-learning stack.
#[derive(Debug, Error)]
pub enum DclError {
    #[error("invalid box {0:?}: coordinates must satisfy 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1")]
    InvalidBox([f64; 4]),
    #[error("unknown category {category} (category set has {count} entries)")]
    UnknownCategory { category: usize, count: usize },
    #[error("layout has {found} foreground instances, limit is {limit}")]
    TooManyInstances { found: usize, limit: usize },
    #[error("layout has no foreground instances")]
    EmptyLayout,
    #[error("box {0:?} covers no pixel centre on a {1}x{2} lattice")]
    EmptyRaster([f64; 4], usize, usize),
    #[error("invalid category set: {0}")]
    InvalidCategories(String),
    #[error("invalid lattice {0}x{1}")]
    InvalidLattice(usize, usize),
    #[error("standardization needs at least two values per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing branch output: {0}")]
    MissingBranch(&'static str),
    #[error("non-finite loss at step {step}: {components}")]
    NonFiniteLoss { step: u64, components: String },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("{path}:{line}: {message}")]
    ManifestParse { path: PathBuf, line: usize, message: String },
    #[error("missing image file {0}")]
    MissingImageFile(PathBuf),
    #[error("box {box_:?} of sample {sample} lies outside the unit square")]
    BoxOutOfBounds { sample: usize, box_: [f64; 4] },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DclError>;
