use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::synth::{flip_pose, render_clip, KeypointTaxonomy, Pose, SynthError};
use crate::tensor::{RotationMap, Tensor4};

/// Where the activations being augmented come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationSource {
    /// Heatmaps generated ahead of training; only image-plane operations apply.
    Pregenerated,
    /// Heatmaps rendered from keypoints per window, so geometry can be rescaled.
    Rendered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Rotation angle drawn uniformly from `[-max, max]` degrees.
    pub rotation_degrees: f64,
    pub rotation_prob: f64,
    pub flip_prob: f64,
    /// Independent horizontal and vertical factors drawn from this range.
    pub scale_range: (f64, f64),
    pub scale_prob: f64,
}

impl Default for AugmentConfig {
    /// Settings for pre-generated activations: scaling off.
    fn default() -> Self {
        AugmentConfig {
            rotation_degrees: 15.0,
            rotation_prob: 0.5,
            flip_prob: 0.5,
            scale_range: (0.75, 1.25),
            scale_prob: 0.0,
        }
    }
}

impl AugmentConfig {
    /// Settings for rendered heatmaps, with scaling enabled.
    pub fn rendered() -> Self {
        AugmentConfig {
            scale_prob: 0.5,
            ..Self::default()
        }
    }

    pub fn none() -> Self {
        AugmentConfig {
            rotation_prob: 0.0,
            flip_prob: 0.0,
            scale_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Augment(m));
        for (name, p) in [
            ("rotation_prob", self.rotation_prob),
            ("flip_prob", self.flip_prob),
            ("scale_prob", self.scale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if !(self.rotation_degrees >= 0.0 && self.rotation_degrees.is_finite()) {
            return bad(format!("rotation range {} must be finite and non-negative", self.rotation_degrees));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("scale range ({lo}, {hi}) must be positive and ordered"));
        }
        Ok(())
    }
}

/// One window's augmentation, shared by every frame and channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    /// Radians; 0 when no rotation was drawn.
    pub theta: f64,
    pub flip: bool,
    /// Horizontal and vertical factors; 1 when no scaling was drawn.
    pub scale: (f64, f64),
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        theta: 0.0,
        flip: false,
        scale: (1.0, 1.0),
    };

    pub fn sample(cfg: &AugmentConfig, source: ActivationSource, rng: &mut impl Rng) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if source == ActivationSource::Pregenerated && cfg.scale_prob > 0.0 {
            return Err(PipelineError::Augment(
                "scaling needs heatmaps rendered from keypoints; it cannot be applied to pre-generated activations"
                    .into(),
            ));
        }
        let mut draw = Self::IDENTITY;
        let rotate = rng.random::<f64>() < cfg.rotation_prob;
        let angle = rng.random_range(-1.0..=1.0) * cfg.rotation_degrees.to_radians();
        if rotate {
            draw.theta = angle;
        }
        draw.flip = rng.random::<f64>() < cfg.flip_prob;
        if source == ActivationSource::Rendered {
            let scale = rng.random::<f64>() < cfg.scale_prob;
            let (lo, hi) = cfg.scale_range;
            let sx = rng.random_range(lo..=hi);
            let sy = rng.random_range(lo..=hi);
            if scale {
                draw.scale = (sx, sy);
            }
        }
        Ok(draw)
    }

    /// Applies flip then rotation to a heatmap clip; scaling must be identity.
    pub fn apply_to_clip(&self, window: &Tensor4<f32>, taxonomy: &KeypointTaxonomy) -> Result<Tensor4<f32>, PipelineError> {
        let mut out = Tensor4::zeros(window.shape());
        let frames: Vec<usize> = (0..window.shape().t).collect();
        self.apply_window_into(window, &frames, taxonomy, out.data_mut())?;
        Ok(out)
    }

    /// Writes the augmented window made of `frames` of `clip` into `dst`,
    /// laid out `(c, frames.len(), h, w)`. Same result as cutting the window
    /// and calling [`apply_to_clip`](Self::apply_to_clip), one plane at a time.
    pub fn apply_window_into(
        &self,
        clip: &Tensor4<f32>,
        frames: &[usize],
        taxonomy: &KeypointTaxonomy,
        dst: &mut [f32],
    ) -> Result<(), PipelineError> {
        if self.scale != (1.0, 1.0) {
            return Err(PipelineError::Augment("cannot rescale pre-generated activations".into()));
        }
        let s = clip.shape();
        let plane = s.h * s.w;
        if dst.len() != s.c * frames.len() * plane || frames.iter().any(|&f| f >= s.t) {
            return Err(PipelineError::Augment(format!(
                "window of {} frames from clip {s} does not fit a buffer of {}",
                frames.len(),
                dst.len()
            )));
        }
        if self.flip && s.c != taxonomy.len() {
            return Err(SynthError::Channels {
                expected: taxonomy.len(),
                got: s.c,
            }
            .into());
        }
        let perm = taxonomy.flip_permutation();
        let map = if self.theta != 0.0 {
            Some(RotationMap::new(s.h, s.w, self.theta)?)
        } else {
            None
        };
        let mut mirrored = vec![0.0f32; plane];
        for (c, planes) in dst.chunks_exact_mut(frames.len() * plane).enumerate() {
            // the flip permutation is an involution
            let source = if self.flip { perm[c] } else { c };
            for (out, &f) in planes.chunks_exact_mut(plane).zip(frames) {
                let src = clip.frame(source, f);
                let src = if self.flip {
                    for (d_row, s_row) in mirrored.chunks_exact_mut(s.w).zip(src.chunks_exact(s.w)) {
                        for (d, v) in d_row.iter_mut().zip(s_row.iter().rev()) {
                            *d = *v;
                        }
                    }
                    &mirrored[..]
                } else {
                    src
                };
                match &map {
                    Some(m) => m.apply(src, out),
                    None => out.copy_from_slice(src),
                }
                for v in out.iter_mut() {
                    *v = v.clamp(0.0, 1.0);
                }
            }
        }
        Ok(())
    }

    /// Scales, flips and rotates keypoints about the grid center. Rotation
    /// matches the direction of `apply_to_clip`.
    pub fn apply_to_pose(&self, pose: &Pose, h: usize, w: usize, taxonomy: &KeypointTaxonomy) -> Pose {
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let mut p = *pose;
        for k in p.iter_mut() {
            k.0 = cx + (k.0 - cx) * self.scale.0;
            k.1 = cy + (k.1 - cy) * self.scale.1;
        }
        if self.flip {
            p = flip_pose(&p, w, taxonomy);
        }
        if self.theta != 0.0 {
            let (s, c) = self.theta.sin_cos();
            for k in p.iter_mut() {
                let (dx, dy) = (k.0 - cx, k.1 - cy);
                *k = (cx - s * dy + c * dx, cy + c * dy + s * dx);
            }
        }
        p
    }
}

/// Augments a pre-generated heatmap window with one draw for the whole window.
pub fn augment(
    window: &Tensor4<f32>,
    cfg: &AugmentConfig,
    taxonomy: &KeypointTaxonomy,
    rng: &mut impl Rng,
) -> Result<Tensor4<f32>, PipelineError> {
    AugmentDraw::sample(cfg, ActivationSource::Pregenerated, rng)?.apply_to_clip(window, taxonomy)
}

/// Augments keypoint trajectories and renders them, allowing scaling.
pub fn augment_rendered(
    poses: &[Pose],
    cfg: &AugmentConfig,
    taxonomy: &KeypointTaxonomy,
    sigma: f64,
    (h, w): (usize, usize),
    rng: &mut impl Rng,
) -> Result<Tensor4<f32>, PipelineError> {
    let draw = AugmentDraw::sample(cfg, ActivationSource::Rendered, rng)?;
    let moved: Vec<Pose> = poses.iter().map(|p| draw.apply_to_pose(p, h, w, taxonomy)).collect();
    Ok(render_clip(&moved, sigma, h, w)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{flip_clip, generate_dataset, SynthConfig};
    use crate::tensor::{rotate2d, Grid2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn window() -> Tensor4<f32> {
        let cfg = SynthConfig {
            subjects: 1,
            repetitions: 1,
            frames: 4..=4,
            actions: vec![crate::synth::SyntheticAction::Wave],
            ..SynthConfig::default()
        };
        generate_dataset(&cfg).unwrap().remove(0).clip
    }

    fn argmax(plane: &[f32], w: usize) -> (usize, usize) {
        let i = plane
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > plane[b] { i } else { b });
        (i % w, i / w)
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let x = window();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let y = augment(&x, &AugmentConfig::none(), &KeypointTaxonomy::coco17(), &mut rng).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn scaling_rejected_for_pregenerated() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = augment(&window(), &AugmentConfig::rendered(), &KeypointTaxonomy::coco17(), &mut rng);
        assert!(matches!(r, Err(PipelineError::Augment(_))));
    }

    #[test]
    fn forced_flip_matches_flip_clip() {
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..AugmentConfig::none()
        };
        let tax = KeypointTaxonomy::coco17();
        let x = window();
        let y = augment(&x, &cfg, &tax, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(y, flip_clip(&x, &tax).unwrap());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let tax = KeypointTaxonomy::coco17();
        let x = window();
        let cfg = AugmentConfig {
            rotation_prob: 1.0,
            ..AugmentConfig::default()
        };
        let a = augment(&x, &cfg, &tax, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment(&x, &cfg, &tax, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pose_rotation_agrees_with_heatmap_rotation() {
        let tax = KeypointTaxonomy::coco17();
        let mut pose = [(0.0, 0.0); 17];
        for (k, p) in pose.iter_mut().enumerate() {
            *p = (14.0 + (k % 5) as f64 * 5.0, 16.0 + (k / 5) as f64 * 9.0);
        }
        let clip = render_clip(&[pose], 2.0, 64, 48).unwrap();
        for theta in [0.2, -0.25] {
            let draw = AugmentDraw { theta, ..AugmentDraw::IDENTITY };
            let rotated = draw.apply_to_clip(&clip, &tax).unwrap();
            let moved = draw.apply_to_pose(&pose, 64, 48, &tax);
            for (k, &(x, y)) in moved.iter().enumerate() {
                let (ax, ay) = argmax(rotated.frame(k, 0), 48);
                assert!((ax as f64 - x).abs() <= 1.0 && (ay as f64 - y).abs() <= 1.0, "{k}: ({ax},{ay}) vs ({x},{y})");
            }
        }
    }

    #[test]
    fn rendered_scaling_moves_keypoints_about_center() {
        let tax = KeypointTaxonomy::coco17();
        let draw = AugmentDraw {
            scale: (0.75, 1.25),
            ..AugmentDraw::IDENTITY
        };
        let mut pose = [(23.5, 31.5); 17];
        pose[0] = (31.5, 39.5);
        let moved = draw.apply_to_pose(&pose, 64, 48, &tax);
        assert_eq!(moved[0], (29.5, 41.5));
        assert_eq!(moved[1], (23.5, 31.5));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AugmentConfig {
            flip_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(AugmentDraw::sample(&cfg, ActivationSource::Rendered, &mut rng).is_err());
        let cfg = AugmentConfig {
            scale_range: (0.0, 1.0),
            ..AugmentConfig::default()
        };
        assert!(AugmentDraw::sample(&cfg, ActivationSource::Rendered, &mut rng).is_err());
    }

    #[test]
    fn fused_window_matches_cut_then_augment() {
        let tax = KeypointTaxonomy::coco17();
        let x = window();
        let frames = [3, 0, 1, 2, 3, 0, 1];
        let cut = x.gather_frames(&frames);
        for (theta, flip) in [(0.0, false), (0.0, true), (0.2, false), (-0.25, true)] {
            let draw = AugmentDraw { theta, flip, ..AugmentDraw::IDENTITY };
            let mut fused = vec![0.0; cut.shape().len()];
            draw.apply_window_into(&x, &frames, &tax, &mut fused).unwrap();
            let mut reference = if flip { flip_clip(&cut, &tax).unwrap() } else { cut.clone() };
            let sh = reference.shape();
            for c in 0..sh.c {
                for t in 0..sh.t {
                    let g = Grid2::from_vec(sh.h, sh.w, reference.frame(c, t).to_vec()).unwrap();
                    let r = rotate2d(&g, theta).unwrap();
                    for (d, v) in reference.frame_mut(c, t).iter_mut().zip(&r.data) {
                        *d = v.clamp(0.0, 1.0);
                    }
                }
            }
            assert_eq!(fused, reference.data());
            assert_eq!(fused, draw.apply_to_clip(&cut, &tax).unwrap().data());
            if !flip && theta == 0.0 {
                assert_eq!(fused, cut.data());
            }
        }
    }
}
