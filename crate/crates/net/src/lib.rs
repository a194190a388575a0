//! Neural components: modality encoders, the shared descriptor head with its
//! triplet objective, and the recurrent correlation-based flow head.
//!
//! Tensors are candle CPU tensors in `f32` (training, inference) or `f64`
//! (gradient checks). Image batches are `(B, 1, H, W)` with `H` and `W`
//! divisible by 8; features live at 1/8 resolution.

pub mod encoders;
pub mod flow_head;
pub mod model;
pub mod ops;
pub mod params;
pub mod place;
pub mod train;

use thiserror::Error;

pub use model::{CheckpointMeta, ModelConfig, Ralf};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("flow mask has no valid pixels")]
    EmptyMask,
    #[error(transparent)]
    Dataset(#[from] ralf_core::dataset::DatasetError),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `f32` model, the default for training and inference.
pub type Model = Ralf;
