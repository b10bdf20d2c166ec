use std::io;

use thiserror::Error;

/// Errors produced anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no foreground pixel under threshold")]
    NoForeground,
    #[error("bounding box {0:?} lies outside a {1}x{2} image")]
    BboxOutOfBounds((usize, usize, usize, usize), usize, usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("input too small: {0}")]
    TooSmall(String),
    #[error("patch size {size} exceeds image side {side}")]
    SizeTooLarge { size: usize, side: usize },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("camera poses must be pairwise distinct")]
    PoseDegeneracy,
    #[error("invalid intensities: {0}")]
    InvalidIntensities(String),
    #[error("non-finite gradient entry at index {0}")]
    NonFiniteGradient(usize),
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("prompt catalog is empty")]
    EmptyCatalog,
    #[error("mismatched batch: {0}")]
    MismatchedBatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
