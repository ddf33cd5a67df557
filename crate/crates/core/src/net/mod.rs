//! The reprojection network: a strided 3D stem, stages of inflated
//! inception modules separated by max pools, and an average-pool /
//! pointwise-conv prediction head whose temporal scores are averaged.

pub mod checkpoint;
mod config;
mod layers;
mod network;

pub use checkpoint::{
    checkpoint_digest, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError,
};
pub use config::{
    HeadSpec, InceptionParams, NetworkConfig, PoolSpec, StageSpec, StemSpec, KEYPOINT_CHANNELS, PYRAMID_CHANNELS,
};
pub(crate) use layers::{Head, Inception, Kinks, Tensors};
pub use layers::{dropout_mask, BatchNorm, BnMode, Param, BN_EPSILON, BN_MOMENTUM, INIT_STD};
pub use network::{argmax, softmax, temporal_mean, Mode, Network, Prediction, WindowScores};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid network config at {layer}: {reason}")]
    InvalidConfig { layer: String, reason: String },
    #[error("input shape: {0}")]
    InputShape(String),
    #[error("window must have {expected} frames, got {got}")]
    WindowLength { expected: usize, got: usize },
    #[error("backward called on {0} without a recorded training forward")]
    MissingForward(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
