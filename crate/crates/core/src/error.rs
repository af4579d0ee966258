use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("domain error in {op}: {reason}")]
    Domain { op: &'static str, reason: String },

    #[error("invalid geometry in {op}: {reason}")]
    Geometry { op: &'static str, reason: String },

    #[error("{axis} extent {extent} is odd; wavelet pooling needs even extents")]
    OddExtent { axis: &'static str, extent: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape")]
    TapeConsumed,

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported checkpoint format: {0}")]
    VersionMismatch(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("no decodable images in {}", .0.display())]
    EmptyCorpus(PathBuf),

    #[error("image error for {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
