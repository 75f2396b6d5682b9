use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the segmentation pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension error on {axis} axis: {message}")]
    Dimension { axis: char, message: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("palette decode error: color ({0}, {1}, {2}) at pixel ({3}, {4}) not in palette")]
    PaletteDecode(u8, u8, u8, usize, usize),

    #[error("mask encode error: class index {index} at pixel ({x}, {y}) out of range for {num_classes} classes")]
    MaskEncode { index: u8, x: usize, y: usize, num_classes: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid label set: {0}")]
    InvalidLabelSet(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint has bad magic bytes")]
    CheckpointBadMagic,

    #[error("checkpoint version {0} unsupported (expected {1})")]
    CheckpointVersion(u32, u32),

    #[error("checkpoint truncated while reading {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    CheckpointChecksum { stored: u32, computed: u32 },

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    TensorShape { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("unexpected tensor {0} in checkpoint")]
    UnexpectedTensor(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("loss undefined: every pixel carries the ignore sentinel")]
    AllPixelsIgnored,

    #[error("no defined classes: every class has an empty union")]
    NoDefinedClasses,

    #[error("unknown model variant {0:?}")]
    UnknownVariant(String),

    #[error("dataset layout error at {path}: {message}")]
    DatasetLayout { path: PathBuf, message: String },

    #[error("image {path}: {message}")]
    ImageFormat { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
