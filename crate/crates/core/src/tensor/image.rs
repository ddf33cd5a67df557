use super::{Result, TensorError};

/// Single-channel row-major `h x w` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Grid2 {
    pub fn zeros(h: usize, w: usize) -> Self {
        Grid2 {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(TensorError::Shape(format!(
                "{} values supplied for a {h}x{w} grid",
                data.len()
            )));
        }
        Ok(Grid2 { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c));
            }
        }
        Grid2 { h, w, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.w + c]
    }

    /// Value at integer coordinates, zero outside the grid.
    #[inline]
    pub fn get_or_zero(&self, r: isize, c: isize) -> f32 {
        if r < 0 || c < 0 || r >= self.h as isize || c >= self.w as isize {
            0.0
        } else {
            self.data[r as usize * self.w + c as usize]
        }
    }

    /// Bilinear sample at real-valued `(row, col)`; taps outside the grid read zero.
    pub fn sample(&self, y: f64, x: f64) -> f32 {
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = (y - y0) as f32;
        let fx = (x - x0) as f32;
        let (r, c) = (y0 as isize, x0 as isize);
        let top = self.get_or_zero(r, c) * (1.0 - fx) + self.get_or_zero(r, c + 1) * fx;
        let bottom = self.get_or_zero(r + 1, c) * (1.0 - fx) + self.get_or_zero(r + 1, c + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Align-corners bilinear resize: corner pixels map onto corner pixels.
pub fn bilinear_resize(x: &Grid2, out_h: usize, out_w: usize) -> Result<Grid2> {
    if x.h == 0 || x.w == 0 || out_h == 0 || out_w == 0 {
        return Err(TensorError::Invalid(format!(
            "cannot resize {}x{} to {out_h}x{out_w}",
            x.h, x.w
        )));
    }
    if (out_h, out_w) == (x.h, x.w) {
        return Ok(x.clone());
    }
    let scale = |n_in: usize, n_out: usize| {
        if n_out > 1 {
            (n_in - 1) as f64 / (n_out - 1) as f64
        } else {
            0.0
        }
    };
    let (sy, sx) = (scale(x.h, out_h), scale(x.w, out_w));
    Ok(Grid2::from_fn(out_h, out_w, |r, c| {
        let y = r as f64 * sy;
        let xx = c as f64 * sx;
        // clamp taps so the far corner reads the last pixel, not the zero border
        let y0 = (y.floor() as usize).min(x.h - 1);
        let x0 = (xx.floor() as usize).min(x.w - 1);
        let y1 = (y0 + 1).min(x.h - 1);
        let x1 = (x0 + 1).min(x.w - 1);
        let fy = (y - y0 as f64) as f32;
        let fx = (xx - x0 as f64) as f32;
        let top = x.get(y0, x0) * (1.0 - fx) + x.get(y0, x1) * fx;
        let bottom = x.get(y1, x0) * (1.0 - fx) + x.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// Mirrors columns.
pub fn hflip(x: &Grid2) -> Grid2 {
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(x.w) {
        row.reverse();
    }
    out
}

/// Precomputed bilinear taps of a rotation about the grid center, so one
/// angle can be applied to many planes of the same size.
#[derive(Debug, Clone)]
pub struct RotationMap {
    h: usize,
    w: usize,
    // per output pixel: four source offsets (usize::MAX = outside) and weights
    taps: Vec<([usize; 4], [f32; 4])>,
    identity: bool,
    sin_cos: (f64, f64),
}

impl RotationMap {
    pub fn new(h: usize, w: usize, theta: f64) -> Result<Self> {
        if !theta.is_finite() {
            return Err(TensorError::Invalid(format!("rotation angle {theta} is not finite")));
        }
        let identity = theta == 0.0;
        let mut taps = Vec::new();
        if !identity {
            taps.reserve(h * w);
            let cy = (h as f64 - 1.0) / 2.0;
            let cx = (w as f64 - 1.0) / 2.0;
            let (s, c) = theta.sin_cos();
            for r in 0..h {
                for col in 0..w {
                    // inverse-map each output pixel into the source grid
                    let dy = r as f64 - cy;
                    let dx = col as f64 - cx;
                    let sy = c * dy - s * dx + cy;
                    let sx = s * dy + c * dx + cx;
                    let y0 = sy.floor();
                    let x0 = sx.floor();
                    let fy = (sy - y0) as f32;
                    let fx = (sx - x0) as f32;
                    let idx = |rr: f64, cc: f64| {
                        if rr < 0.0 || cc < 0.0 || rr >= h as f64 || cc >= w as f64 {
                            usize::MAX
                        } else {
                            rr as usize * w + cc as usize
                        }
                    };
                    taps.push((
                        [idx(y0, x0), idx(y0, x0 + 1.0), idx(y0 + 1.0, x0), idx(y0 + 1.0, x0 + 1.0)],
                        [
                            (1.0 - fy) * (1.0 - fx),
                            (1.0 - fy) * fx,
                            fy * (1.0 - fx),
                            fy * fx,
                        ],
                    ));
                }
            }
        }
        Ok(RotationMap {
            h,
            w,
            taps,
            identity,
            sin_cos: theta.sin_cos(),
        })
    }

    /// Rotates one `h x w` plane from `src` into `dst`. Only the rotated
    /// bounding box of the nonzero source support is sampled; everything
    /// else is exactly zero.
    pub fn apply(&self, src: &[f32], dst: &mut [f32]) {
        debug_assert_eq!(src.len(), self.h * self.w);
        if self.identity {
            dst.copy_from_slice(src);
            return;
        }
        dst.fill(0.0);
        let Some((rows, cols)) = self.target_region(src) else {
            return;
        };
        for r in rows {
            let base = r * self.w;
            self.sample_span(src, &mut dst[base + cols.start..base + cols.end], base + cols.start);
        }
    }

    fn sample_span(&self, src: &[f32], dst: &mut [f32], first: usize) {
        for (d, (idx, wt)) in dst.iter_mut().zip(&self.taps[first..]) {
            let mut acc = 0.0f32;
            for k in 0..4 {
                if idx[k] != usize::MAX {
                    acc += src[idx[k]] * wt[k];
                }
            }
            *d = acc;
        }
    }

    /// Output rows and columns that can receive a nonzero sample.
    fn target_region(&self, src: &[f32]) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for (r, row) in src.chunks_exact(self.w).enumerate() {
            let Some(first) = row.iter().position(|v| *v != 0.0) else {
                continue;
            };
            let last = row.iter().rposition(|v| *v != 0.0).unwrap_or(first);
            r0 = r0.min(r);
            r1 = r;
            c0 = c0.min(first);
            c1 = c1.max(last);
        }
        if r0 == usize::MAX {
            return None;
        }
        // a bilinear tap reaches one pixel, plus one more for rounding
        let cy = (self.h as f64 - 1.0) / 2.0;
        let cx = (self.w as f64 - 1.0) / 2.0;
        let (s, c) = self.sin_cos;
        let (mut ylo, mut yhi, mut xlo, mut xhi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for qy in [r0 as f64 - 2.0, r1 as f64 + 2.0] {
            for qx in [c0 as f64 - 2.0, c1 as f64 + 2.0] {
                let (ey, ex) = (qy - cy, qx - cx);
                let y = c * ey + s * ex + cy;
                let x = -s * ey + c * ex + cx;
                ylo = ylo.min(y);
                yhi = yhi.max(y);
                xlo = xlo.min(x);
                xhi = xhi.max(x);
            }
        }
        let clamp = |v: f64, n: usize| v.clamp(0.0, n as f64) as usize;
        let rows = clamp(ylo.floor(), self.h)..clamp(yhi.ceil() + 1.0, self.h);
        let cols = clamp(xlo.floor(), self.w)..clamp(xhi.ceil() + 1.0, self.w);
        Some((rows, cols))
    }
}

/// Rotates about the grid center by `theta` radians with bilinear sampling;
/// samples falling outside the grid read zero.
pub fn rotate2d(x: &Grid2, theta: f64) -> Result<Grid2> {
    let map = RotationMap::new(x.h, x.w, theta)?;
    let mut out = Grid2::zeros(x.h, x.w);
    map.apply(&x.data, &mut out.data);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_two_by_two_to_three_by_three() {
        let x = Grid2::from_vec(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = bilinear_resize(&x, 3, 3).unwrap();
        assert_eq!(y.data, vec![0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn resize_same_size_and_constant() {
        let x = Grid2::from_fn(5, 4, |r, c| (r * 4 + c) as f32);
        assert_eq!(bilinear_resize(&x, 5, 4).unwrap(), x);
        let k = Grid2::from_fn(3, 7, |_, _| 0.75);
        let y = bilinear_resize(&k, 11, 2).unwrap();
        assert!(y.data.iter().all(|&v| (v - 0.75).abs() < 1e-7));
    }

    #[test]
    fn resize_rejects_zero_extent() {
        let x = Grid2::zeros(2, 2);
        assert!(bilinear_resize(&x, 0, 3).is_err());
    }

    #[test]
    fn hflip_examples() {
        let x = Grid2::from_vec(1, 3, vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(hflip(&x).data, vec![2.0, 1.0, 0.0]);
        let sym = Grid2::from_vec(2, 3, vec![1.0, 5.0, 1.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(hflip(&sym), sym);
    }

    #[test]
    fn rotation_zero_is_identity() {
        let x = Grid2::from_fn(6, 5, |r, c| (r as f32).sin() + c as f32);
        assert_eq!(rotate2d(&x, 0.0).unwrap(), x);
    }

    #[test]
    fn center_impulse_is_fixed() {
        let mut x = Grid2::zeros(9, 7);
        x.data[4 * 7 + 3] = 1.0;
        for theta in [0.1, 0.7, 1.3, -2.0, std::f64::consts::PI] {
            let y = rotate2d(&x, theta).unwrap();
            assert!((y.get(4, 3) - 1.0).abs() < 1e-6, "theta {theta}");
        }
    }

    #[test]
    fn rotation_rejects_nan() {
        assert!(rotate2d(&Grid2::zeros(2, 2), f64::NAN).is_err());
    }

    proptest::proptest! {
        #[test]
        fn support_limited_rotation_matches_full_sampling(
            theta in -3.2f64..3.2,
            blobs in proptest::collection::vec((0usize..40, 0usize..30, 0.1f32..1.0), 0..3),
        ) {
            let (h, w) = (40, 30);
            let mut src = vec![0.0f32; h * w];
            for (r, c, v) in blobs {
                for dr in 0..3 {
                    for dc in 0..2 {
                        if r + dr < h && c + dc < w {
                            src[(r + dr) * w + c + dc] = v;
                        }
                    }
                }
            }
            let map = RotationMap::new(h, w, theta).unwrap();
            let mut fast = vec![1.0f32; h * w];
            map.apply(&src, &mut fast);
            let mut full = vec![0.0f32; h * w];
            map.sample_span(&src, &mut full, 0);
            proptest::prop_assert_eq!(fast, full);
        }
    }
}
