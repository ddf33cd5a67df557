use super::{Pose, SynthError};
use crate::tensor::{Grid2, Tensor4};

/// Heatmaps are exactly zero beyond this many standard deviations.
pub const TRUNCATION_SIGMAS: f64 = 3.0;

/// Unnormalized Gaussian `exp(-((x-cx)^2 + (y-cy)^2) / (2 sigma^2))` centered at
/// grid coordinates `(x, y)` = (column, row).
pub fn render_heatmap(center: (f64, f64), sigma: f64, h: usize, w: usize) -> Result<Grid2, SynthError> {
    check_sigma(sigma)?;
    let mut g = Grid2::zeros(h, w);
    splat(&mut g.data, h, w, center, sigma);
    Ok(g)
}

fn check_sigma(sigma: f64) -> Result<(), SynthError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(SynthError::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Writes one Gaussian into a zeroed `h x w` plane.
fn splat(plane: &mut [f32], h: usize, w: usize, (cx, cy): (f64, f64), sigma: f64) {
    let radius = TRUNCATION_SIGMAS * sigma;
    let r2 = radius * radius;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let lo = |c: f64| (c - radius).ceil().max(0.0) as usize;
    let hi = |c: f64, n: usize| ((c + radius).floor().max(-1.0) + 1.0).min(n as f64) as usize;
    if !(cx.is_finite() && cy.is_finite()) {
        return;
    }
    for r in lo(cy)..hi(cy, h) {
        let dy = r as f64 - cy;
        for c in lo(cx)..hi(cx, w) {
            let dx = c as f64 - cx;
            let d2 = dx * dx + dy * dy;
            if d2 <= r2 {
                plane[r * w + c] = (-d2 * inv).exp() as f32;
            }
        }
    }
}

/// Renders a pose sequence into a `(keypoints, frames, h, w)` activation clip.
pub fn render_clip(poses: &[Pose], sigma: f64, h: usize, w: usize) -> Result<Tensor4<f32>, SynthError> {
    check_sigma(sigma)?;
    if poses.is_empty() {
        return Err(SynthError::Invalid("cannot render an empty pose sequence".into()));
    }
    let k = poses[0].len();
    let mut clip = Tensor4::zeros((k, poses.len(), h, w));
    for (t, pose) in poses.iter().enumerate() {
        for (c, &p) in pose.iter().enumerate() {
            splat(clip.frame_mut(c, t), h, w, p, sigma);
        }
    }
    Ok(clip)
}
