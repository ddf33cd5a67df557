//! Synthetic keypoint-trajectory datasets rendered as heatmap clips, standing
//! in for a pose-estimation backbone.

mod motion;
mod render;
pub mod taxonomy;

use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use motion::{Performance, SubjectParams, SyntheticAction, BASE_PERIOD, LIMB_SCALE_RANGE, SPEED_RANGE};
pub use render::{render_clip, render_heatmap, TRUNCATION_SIGMAS};
pub use taxonomy::KeypointTaxonomy;

use crate::pipeline::VideoSample;
use crate::tensor::{Scalar, Tensor4};

/// Keypoint centers `(x, y)` in grid units, one per taxonomy entry.
pub type Pose = [(f64, f64); 17];

pub const GRID_HEIGHT: usize = 64;
pub const GRID_WIDTH: usize = 48;
pub const DEFAULT_SIGMA: f64 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthesis parameters: {0}")]
    Invalid(String),
    #[error("clip has {got} channels but the taxonomy has {expected}")]
    Channels { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub actions: Vec<SyntheticAction>,
    pub subjects: u16,
    pub repetitions: u16,
    pub frames: RangeInclusive<usize>,
    pub sigma: f64,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            actions: SyntheticAction::ALL.to_vec(),
            subjects: 8,
            repetitions: 4,
            frames: 20..=60,
            sigma: DEFAULT_SIGMA,
            height: GRID_HEIGHT,
            width: GRID_WIDTH,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Invalid(m));
        if self.actions.is_empty() || self.subjects == 0 || self.repetitions == 0 {
            return bad("need at least one action, subject and repetition".into());
        }
        if self.frames.is_empty() || *self.frames.start() == 0 {
            return bad(format!("frame range {:?} is empty or starts at 0", self.frames));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        // the body needs roughly 48 x 40 grid units
        let m = 4.0 * self.sigma;
        if (self.height as f64) < 48.0 + m || (self.width as f64) < 40.0 + m {
            return bad(format!("grid {}x{} too small for the body model", self.height, self.width));
        }
        Ok(())
    }
}

/// One sample's identity and motion, before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    pub action: u16,
    pub subject: u16,
    pub repetition: u16,
    pub frames: usize,
    pub performance: Performance,
}

impl SampleSpec {
    pub fn poses(&self) -> Vec<Pose> {
        self.performance.poses(self.frames)
    }
}

/// Every sample of the dataset in class, subject, repetition order. Sample `i`
/// depends only on `(seed, i)` and its subject's parameters.
pub fn dataset_specs(cfg: &SynthConfig) -> Result<Vec<SampleSpec>, SynthError> {
    cfg.validate()?;
    let mut specs = Vec::new();
    for (class, &action) in cfg.actions.iter().enumerate() {
        for subject in 1..=cfg.subjects {
            let params = SubjectParams::for_subject(subject, cfg.seed);
            for repetition in 1..=cfg.repetitions {
                let index = specs.len() as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
                let frames = rng.random_range(cfg.frames.clone());
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                specs.push(SampleSpec {
                    action: class as u16,
                    subject,
                    repetition,
                    frames,
                    performance: Performance {
                        action,
                        subject: params,
                        phase,
                        height: cfg.height,
                        width: cfg.width,
                        margin: 2.0 * cfg.sigma,
                    },
                });
            }
        }
    }
    Ok(specs)
}

pub fn render_sample(spec: &SampleSpec, cfg: &SynthConfig) -> Result<VideoSample, SynthError> {
    Ok(VideoSample {
        clip: render_clip(&spec.poses(), cfg.sigma, cfg.height, cfg.width)?,
        subject: spec.subject,
        action: spec.action,
        repetition: spec.repetition,
    })
}

/// `actions x subjects x repetitions` rendered samples.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<VideoSample>, SynthError> {
    dataset_specs(cfg)?.iter().map(|s| render_sample(s, cfg)).collect()
}

/// Mirrors every frame and swaps left/right channels.
pub fn flip_clip<T: Scalar>(clip: &Tensor4<T>, taxonomy: &KeypointTaxonomy) -> Result<Tensor4<T>, SynthError> {
    let s = clip.shape();
    if s.c != taxonomy.len() {
        return Err(SynthError::Channels {
            expected: taxonomy.len(),
            got: s.c,
        });
    }
    let perm = taxonomy.flip_permutation();
    let mut out = Tensor4::zeros(s);
    for c in 0..s.c {
        for t in 0..s.t {
            let src = clip.frame(c, t);
            let dst = out.frame_mut(perm[c], t);
            for (d_row, s_row) in dst.chunks_exact_mut(s.w).zip(src.chunks_exact(s.w)) {
                for (d, v) in d_row.iter_mut().zip(s_row.iter().rev()) {
                    *d = *v;
                }
            }
        }
    }
    Ok(out)
}

/// Mirrors keypoint coordinates and swaps left/right entries.
pub fn flip_pose(pose: &Pose, width: usize, taxonomy: &KeypointTaxonomy) -> Pose {
    let perm = taxonomy.flip_permutation();
    let mut out = *pose;
    for (c, &(x, y)) in pose.iter().enumerate() {
        out[perm[c]] = (width as f64 - 1.0 - x, y);
    }
    out
}
