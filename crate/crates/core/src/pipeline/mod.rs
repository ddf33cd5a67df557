//! Dataset mechanics: windows, augmentation, splits and clip persistence.

mod augment;
pub mod clipfile;
mod manifest;
mod split;
mod window;

pub use augment::{augment, augment_rendered, ActivationSource, AugmentConfig, AugmentDraw};
pub use clipfile::{read_clip, read_clip_header, write_clip, ClipFileError, CLIP_EXTENSION};
pub use manifest::{Manifest, ManifestError, ManifestRecord};
pub use split::{cross_subject_split, is_training_subject};
pub use window::{loop_clip, sample_window, window_indices, window_start, WindowSpec, WindowStart};

use crate::synth::SynthError;
use crate::tensor::{Tensor4, TensorError};

/// Keypoint heatmaps over time, `(keypoints, frames, h, w)`, values in `[0, 1]`.
pub type ActivationClip = Tensor4<f32>;

/// One labeled performance of an action.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub clip: ActivationClip,
    /// Performer id, 1 to 8.
    pub subject: u16,
    /// Class index.
    pub action: u16,
    pub repetition: u16,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("subject id {0} is outside 1..=8")]
    Subject(u16),
    #[error("augmentation: {0}")]
    Augment(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
