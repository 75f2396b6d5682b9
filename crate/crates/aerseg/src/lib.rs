//! Semantic-segmentation pipeline toolkit for oversized oblique UAV imagery.
//!
//! The crate covers the full experimental loop: dataset ingestion and tiling
//! ([`dataio`]), a hierarchical-transformer segmentation model ([`model`]),
//! hybrid-loss training with AdamW and polynomial LR decay ([`train`]),
//! sliding-window inference with flip TTA and geometric-mean ensembling
//! ([`infer`]), and IoU/efficiency evaluation ([`metrics`]).

pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    softmax_pixelwise, ClassMask, LabelEntry, LabelSet, PlaneImage, Rect, ScoreKind, ScoreMap,
    IGNORE_INDEX,
};
