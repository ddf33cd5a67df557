use rand::Rng;

use crate::tensor::{Scalar, Tensor4};

/// Where a window starts within its clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowStart {
    Explicit(usize),
    /// Uniform over every frame of the clip.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub length: usize,
    pub start: WindowStart,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            length: 32,
            start: WindowStart::Random,
        }
    }
}

/// Source frame of each window position: `(start + i) mod frames`.
pub fn window_indices(frames: usize, start: usize, length: usize) -> Vec<usize> {
    assert!(frames > 0, "window over an empty clip");
    (0..length).map(|i| (start + i) % frames).collect()
}

/// `length` frames of `clip` from `start`, looping the clip as often as needed.
pub fn loop_clip<T: Scalar>(clip: &Tensor4<T>, start: usize, length: usize) -> Tensor4<T> {
    clip.gather_frames(&window_indices(clip.shape().t, start, length))
}

/// Start frame of a window over a clip of `frames` frames, drawn from `rng`
/// when random.
pub fn window_start(frames: usize, spec: &WindowSpec, rng: &mut impl Rng) -> usize {
    match spec.start {
        WindowStart::Explicit(s) => s % frames,
        WindowStart::Random => rng.random_range(0..frames),
    }
}

/// Cuts a training window, drawing the start frame from `rng` when random.
pub fn sample_window<T: Scalar>(clip: &Tensor4<T>, spec: &WindowSpec, rng: &mut impl Rng) -> Tensor4<T> {
    let start = window_start(clip.shape().t, spec, rng);
    loop_clip(clip, start, spec.length)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn short_clip_loops() {
        let idx = window_indices(20, 0, 32);
        let want: Vec<usize> = (0..20).chain(0..12).collect();
        assert_eq!(idx, want);
    }

    #[test]
    fn long_clip_does_not_wrap() {
        assert_eq!(window_indices(100, 40, 32), (40..72).collect::<Vec<_>>());
    }

    #[test]
    fn single_frame_repeats() {
        let clip = Tensor4::<f32>::from_fn((2, 1, 3, 3), |c, _, h, w| (c * 9 + h * 3 + w) as f32);
        let win = loop_clip(&clip, 0, 32);
        for t in 0..32 {
            for c in 0..2 {
                assert_eq!(win.frame(c, t), clip.frame(c, 0));
            }
        }
    }

    #[test]
    fn window_frames_follow_modular_rule() {
        let clip = Tensor4::<f32>::from_fn((1, 7, 1, 1), |_, t, _, _| t as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = WindowSpec::default();
        let win = sample_window(&clip, &spec, &mut rng);
        let start = win.get(0, 0, 0, 0) as usize;
        for i in 0..32 {
            assert_eq!(win.get(0, i, 0, 0) as usize, (start + i) % 7);
        }
    }
}
