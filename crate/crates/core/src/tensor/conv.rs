use serde::{Deserialize, Serialize};

use super::{window_extent, Result, Scalar, Shape4, Tensor4, TensorError};

/// Zero-padding mode of a windowed op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Output extent `ceil(n / s)`; odd padding goes to the trailing side.
    Same,
    /// No padding; output extent `floor((n - k) / s) + 1`.
    Valid,
}

/// Kernel, stride and channel widths of one 3D convolution.
///
/// Kernel and stride are `(frames, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn new(
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        ConvSpec {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    /// 1x1x1 stride-1 convolution.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new([1, 1, 1], [1, 1, 1], Padding::Same, in_channels, out_channels)
    }

    /// Stride-1 same-padded cube kernel.
    pub fn cube(k: usize, in_channels: usize, out_channels: usize) -> Self {
        Self::new([k, k, k], [1, 1, 1], Padding::Same, in_channels, out_channels)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_volume()
    }

    pub fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        Ok(self.geometry(input)?.output)
    }

    pub(crate) fn geometry(&self, input: Shape4) -> Result<ConvGeometry> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(TensorError::Invalid(format!(
                "conv channel widths must be positive, got {} -> {}",
                self.in_channels, self.out_channels
            )));
        }
        if input.c != self.in_channels {
            return Err(TensorError::Shape(format!(
                "conv expects {} input channels, input has shape {input}",
                self.in_channels
            )));
        }
        let dims = [input.t, input.h, input.w];
        let mut out = [0usize; 3];
        let mut pad = [0usize; 3];
        for a in 0..3 {
            let (o, p) = window_extent(dims[a], self.kernel[a], self.stride[a], self.padding)
                .ok_or_else(|| {
                    TensorError::EmptyOutput(format!(
                        "conv kernel {:?} stride {:?} ({:?} padding) on input {input}",
                        self.kernel, self.stride, self.padding
                    ))
                })?;
            out[a] = o;
            pad[a] = p;
        }
        Ok(ConvGeometry {
            input,
            output: Shape4::new(self.out_channels, out[0], out[1], out[2]),
            kernel: self.kernel,
            stride: self.stride,
            pad,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub input: Shape4,
    pub output: Shape4,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeometry {
    fn positions(&self) -> usize {
        self.output.plane()
    }

    fn patch_len(&self) -> usize {
        self.input.c * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }
}

/// Weights `(out_c, in_c, kt, kh, kw)` and per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights<T = f32> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn zeros(spec: &ConvSpec) -> Self {
        ConvWeights {
            weight: vec![T::zero(); spec.weight_len()],
            bias: vec![T::zero(); spec.out_channels],
        }
    }

    fn check(&self, spec: &ConvSpec) -> Result<()> {
        if self.weight.len() != spec.weight_len() {
            return Err(TensorError::Shape(format!(
                "conv weight has {} elements, spec {:?} needs {}",
                self.weight.len(),
                spec,
                spec.weight_len()
            )));
        }
        if self.bias.len() != spec.out_channels {
            return Err(TensorError::Shape(format!(
                "conv bias has {} elements for {} output channels",
                self.bias.len(),
                spec.out_channels
            )));
        }
        Ok(())
    }
}

/// Gradients returned by [`conv3d_grad`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T = f32> {
    pub input: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Reusable buffers for the conv kernels.
#[derive(Debug, Default)]
pub(crate) struct ConvScratch<T> {
    cols: Vec<T>,
    aux: Vec<T>,
}

impl<T: Scalar> ConvScratch<T> {
    pub fn new() -> Self {
        ConvScratch {
            cols: Vec::new(),
            aux: Vec::new(),
        }
    }
}

fn resize<T: Scalar>(buf: &mut Vec<T>, len: usize) {
    buf.clear();
    buf.resize(len, T::zero());
}

// Inputs below this density take the zero-skipping scatter path. Pose heatmap
// stacks are a few percent dense; post-ReLU activations are not.
const SPARSE_DENSITY: f64 = 0.1;

fn is_sparse<T: Scalar>(x: &[T]) -> bool {
    let nnz = x.iter().filter(|v| !v.is_zero()).count();
    (nnz as f64) < SPARSE_DENSITY * x.len() as f64
}

/// Valid output range along one axis for kernel tap `k`: output index `o`
/// reads input `o * s + k - pad`, which must land in `0..n`.
#[inline]
fn tap_range(n: usize, k: usize, s: usize, pad: usize, out: usize) -> (usize, usize) {
    // smallest o with o*s + k >= pad
    let lo = pad.saturating_sub(k).div_ceil(s);
    // largest o with o*s + k - pad <= n - 1
    let hi = if n + pad > k { ((n + pad - k - 1) / s + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Walks the patch matrix `(in_c * kt * kh * kw) x positions` in runs of
/// contiguous output columns: `f(row, q, x_offset, span)` covers columns
/// `q..q + span` of `row`, which read input elements `x_offset + j * stride_w`.
fn for_each_run(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (i, o) = (g.input, g.output);
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let mut row = 0;
    for c in 0..i.c {
        let plane = c * i.plane();
        for dt in 0..kt {
            let (t_lo, t_hi) = tap_range(i.t, dt, st, pt, o.t);
            for dh in 0..kh {
                let (h_lo, h_hi) = tap_range(i.h, dh, sh, ph, o.h);
                for dw in 0..kw {
                    let (w_lo, w_hi) = tap_range(i.w, dw, sw, pw, o.w);
                    if w_lo < w_hi {
                        for ot in t_lo..t_hi {
                            let ti = ot * st + dt - pt;
                            for oh in h_lo..h_hi {
                                let hi = oh * sh + dh - ph;
                                let q = (ot * o.h + oh) * o.w + w_lo;
                                let base = plane + (ti * i.h + hi) * i.w + w_lo * sw + dw - pw;
                                f(row, q, base, w_hi - w_lo);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut Vec<T>) {
    let p = g.positions();
    resize(cols, g.patch_len() * p);
    let sw = g.stride[2];
    for_each_run(g, |row, q, base, span| {
        let dst = &mut cols[row * p + q..row * p + q + span];
        if sw == 1 {
            dst.copy_from_slice(&x[base..base + span]);
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = x[base + j * sw];
            }
        }
    });
}

/// Adjoint of [`im2col`]: scatter-adds the patch matrix onto `dx`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let p = g.positions();
    let sw = g.stride[2];
    dx.iter_mut().for_each(|v| *v = T::zero());
    for_each_run(g, |row, q, base, span| {
        let src = &cols[row * p + q..row * p + q + span];
        if sw == 1 {
            for (d, &v) in dx[base..base + span].iter_mut().zip(src) {
                *d += v;
            }
        } else {
            for (j, &v) in src.iter().enumerate() {
                dx[base + j * sw] += v;
            }
        }
    });
}

/// Per-axis table: for input index `i`, the `(tap, output index)` pairs that
/// read it are `pairs[offsets[i]..offsets[i + 1]]`.
struct TapTable {
    offsets: Vec<usize>,
    pairs: Vec<(usize, usize)>,
}

impl TapTable {
    fn new(n: usize, k: usize, s: usize, pad: usize, out: usize) -> Self {
        let mut offsets = vec![0];
        let mut pairs = Vec::new();
        for i in 0..n {
            for d in 0..k {
                if let Some(num) = (i + pad).checked_sub(d) {
                    if num % s == 0 && num / s < out {
                        pairs.push((d, num / s));
                    }
                }
            }
            offsets.push(pairs.len());
        }
        TapTable { offsets, pairs }
    }

    #[inline]
    fn at(&self, i: usize) -> &[(usize, usize)] {
        &self.pairs[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// Zero-skipping scatter over every nonzero input element: calls
/// `f(patch_row, position, value)` for each kernel tap reading it. Works a
/// row at a time so the temporal and vertical taps are resolved once per row.
fn scatter_nonzero<T: Scalar>(x: &[T], g: &ConvGeometry, mut f: impl FnMut(usize, usize, T)) {
    let (i, o) = (g.input, g.output);
    let [kt, kh, kw] = g.kernel;
    let tt = TapTable::new(i.t, kt, g.stride[0], g.pad[0], o.t);
    let th = TapTable::new(i.h, kh, g.stride[1], g.pad[1], o.h);
    let tw = TapTable::new(i.w, kw, g.stride[2], g.pad[2], o.w);
    let mut nz: Vec<(usize, T)> = Vec::with_capacity(i.w);
    for (r, row) in x.chunks_exact(i.w).enumerate() {
        // branch-free test first; most rows of a heatmap stack are empty
        if !row.iter().fold(false, |any, v| any | !v.is_zero()) {
            continue;
        }
        nz.clear();
        nz.extend(row.iter().enumerate().filter(|(_, v)| !v.is_zero()).map(|(w, &v)| (w, v)));
        if nz.is_empty() {
            continue;
        }
        let h = r % i.h;
        let t = (r / i.h) % i.t;
        let c = r / (i.h * i.t);
        for &(dt, ot) in tt.at(t) {
            for &(dh, oh) in th.at(h) {
                let rbase = ((c * kt + dt) * kh + dh) * kw;
                let qbase = (ot * o.h + oh) * o.w;
                for &(w, v) in &nz {
                    for &(dw, ow) in tw.at(w) {
                        f(rbase + dw, qbase + ow, v);
                    }
                }
            }
        }
    }
}

/// `dst += v * src` over equal-length rows.
#[inline(always)]
fn axpy<T: Scalar>(dst: &mut [T], v: T, src: &[T]) {
    if let (Ok(d), Ok(s)) = (<&mut [T; 8]>::try_from(&mut *dst), <&[T; 8]>::try_from(src)) {
        for j in 0..8 {
            d[j] += v * s[j];
        }
        return;
    }
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += v * b;
    }
}

fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Single-sample forward convolution into `out` (overwritten).
pub(crate) fn conv_forward_into<T: Scalar>(
    x: &[T],
    g: &ConvGeometry,
    weight: &[T],
    bias: &[T],
    out: &mut [T],
    scratch: &mut ConvScratch<T>,
) {
    let oc = g.output.c;
    let p = g.positions();
    let k = g.patch_len();
    debug_assert_eq!(x.len(), g.input.len());
    debug_assert_eq!(out.len(), g.output.len());

    if !g.is_pointwise() && is_sparse(x) {
        // scatter each nonzero input through every tap; accumulate (position, channel)
        let wt = &mut scratch.aux;
        resize(wt, k * oc);
        transpose(weight, oc, k, wt);
        let acc = &mut scratch.cols;
        resize(acc, p * oc);
        for q in 0..p {
            acc[q * oc..(q + 1) * oc].copy_from_slice(bias);
        }
        scatter_nonzero(x, g, |row, q, v| {
            axpy(&mut acc[q * oc..(q + 1) * oc], v, &wt[row * oc..(row + 1) * oc]);
        });
        transpose(acc, p, oc, out);
        return;
    }

    for (o, chunk) in out.chunks_exact_mut(p).enumerate() {
        chunk.iter_mut().for_each(|v| *v = bias[o]);
    }
    if g.is_pointwise() {
        T::gemm(oc, k, p, T::one(), weight, false, x, false, T::one(), out);
    } else {
        im2col(x, g, &mut scratch.cols);
        T::gemm(oc, k, p, T::one(), weight, false, &scratch.cols, false, T::one(), out);
    }
}

/// Single-sample conv backward. Weight and bias gradients are accumulated;
/// `dx`, when requested, is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward_into<T: Scalar>(
    x: &[T],
    g: &ConvGeometry,
    weight: &[T],
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    dx: Option<&mut [T]>,
    scratch: &mut ConvScratch<T>,
) {
    let oc = g.output.c;
    let p = g.positions();
    let k = g.patch_len();

    for (o, chunk) in dy.chunks_exact(p).enumerate() {
        dbias[o] += chunk.iter().copied().sum::<T>();
    }

    if g.is_pointwise() {
        T::gemm(oc, p, k, T::one(), dy, false, x, true, T::one(), dweight);
        if let Some(dx) = dx {
            T::gemm(k, oc, p, T::one(), weight, true, dy, false, T::zero(), dx);
        }
        return;
    }

    if is_sparse(x) {
        let dyt = &mut scratch.aux;
        resize(dyt, p * oc);
        transpose(dy, oc, p, dyt);
        let acc = &mut scratch.cols;
        resize(acc, k * oc);
        scatter_nonzero(x, g, |row, q, v| {
            axpy(&mut acc[row * oc..(row + 1) * oc], v, &dyt[q * oc..(q + 1) * oc]);
        });
        for o in 0..oc {
            for r in 0..k {
                dweight[o * k + r] += acc[r * oc + o];
            }
        }
    } else {
        im2col(x, g, &mut scratch.cols);
        T::gemm(oc, p, k, T::one(), dy, false, &scratch.cols, true, T::one(), dweight);
    }

    if let Some(dx) = dx {
        let cols = &mut scratch.cols;
        resize(cols, k * p);
        T::gemm(k, oc, p, T::one(), weight, true, dy, false, T::zero(), cols);
        col2im(cols, g, dx);
    }
}

/// 3D convolution of one sample: each output element is the kernel dot
/// product with the zero-padded input window, plus bias.
pub fn conv3d<T: Scalar>(x: &Tensor4<T>, weights: &ConvWeights<T>, spec: &ConvSpec) -> Result<Tensor4<T>> {
    let g = spec.geometry(x.shape())?;
    weights.check(spec)?;
    let mut out = Tensor4::zeros(g.output);
    conv_forward_into(
        x.data(),
        &g,
        &weights.weight,
        &weights.bias,
        out.data_mut(),
        &mut ConvScratch::new(),
    );
    Ok(out)
}

/// Gradients of `sum(upstream * conv3d(x))` with respect to input, weights and bias.
pub fn conv3d_grad<T: Scalar>(
    x: &Tensor4<T>,
    weights: &ConvWeights<T>,
    upstream: &Tensor4<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let g = spec.geometry(x.shape())?;
    weights.check(spec)?;
    if upstream.shape() != g.output {
        return Err(TensorError::Shape(format!(
            "upstream gradient has shape {} but conv output is {}",
            upstream.shape(),
            g.output
        )));
    }
    let mut grads = ConvGrads {
        input: Tensor4::zeros(g.input),
        weight: vec![T::zero(); spec.weight_len()],
        bias: vec![T::zero(); spec.out_channels],
    };
    conv_backward_into(
        x.data(),
        &g,
        &weights.weight,
        upstream.data(),
        &mut grads.weight,
        &mut grads.bias,
        Some(grads.input.data_mut()),
        &mut ConvScratch::new(),
    );
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: Shape4, density: f64) -> Tensor4<T> {
        Tensor4::from_fn(shape, |_, _, _, _| {
            if rng.random::<f64>() < density {
                T::from_f64(rng.random_range(-1.0..1.0))
            } else {
                T::zero()
            }
        })
    }

    fn random_weights<T: Scalar>(rng: &mut ChaCha8Rng, spec: &ConvSpec) -> ConvWeights<T> {
        ConvWeights {
            weight: (0..spec.weight_len()).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect(),
            bias: (0..spec.out_channels).map(|_| T::from_f64(rng.random_range(-1.0..1.0))).collect(),
        }
    }

    /// Direct seven-loop convolution used as the reference.
    fn oracle(x: &Tensor4<f64>, w: &ConvWeights<f64>, spec: &ConvSpec) -> Tensor4<f64> {
        let s = x.shape();
        let out = spec.output_shape(s).unwrap();
        let g = spec.geometry(s).unwrap();
        let [kt, kh, kw] = spec.kernel;
        Tensor4::from_fn(out, |o, t, h, ww| {
            let mut acc = w.bias[o];
            for c in 0..s.c {
                for dt in 0..kt {
                    for dh in 0..kh {
                        for dw in 0..kw {
                            let ti = (t * spec.stride[0] + dt) as isize - g.pad[0] as isize;
                            let hi = (h * spec.stride[1] + dh) as isize - g.pad[1] as isize;
                            let wi = (ww * spec.stride[2] + dw) as isize - g.pad[2] as isize;
                            if ti < 0 || hi < 0 || wi < 0 {
                                continue;
                            }
                            let (ti, hi, wi) = (ti as usize, hi as usize, wi as usize);
                            if ti >= s.t || hi >= s.h || wi >= s.w {
                                continue;
                            }
                            let widx = (((o * s.c + c) * kt + dt) * kh + dh) * kw + dw;
                            acc += w.weight[widx] * x.get(c, ti, hi, wi);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor4<f32> = random_tensor(&mut rng, Shape4::new(1, 4, 4, 4), 1.0);
        let spec = ConvSpec::pointwise(1, 1);
        let w = ConvWeights { weight: vec![1.0], bias: vec![0.0] };
        assert_eq!(conv3d(&x, &w, &spec).unwrap(), x);
    }

    #[test]
    fn stem_output_shape() {
        let spec = ConvSpec::new([7, 3, 3], [2, 2, 2], Padding::Same, 17, 64);
        assert_eq!(spec.output_shape(Shape4::new(17, 32, 64, 48)).unwrap(), Shape4::new(64, 16, 32, 24));
    }

    #[test]
    fn valid_conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ConvSpec::new([3, 3, 3], [1, 1, 1], Padding::Valid, 2, 3);
        let x: Tensor4<f64> = random_tensor(&mut rng, Shape4::new(2, 5, 6, 6), 1.0);
        let w = random_weights(&mut rng, &spec);
        let want = oracle(&x, &w, &spec);
        let got = conv3d(&x.cast::<f32>(), &w_cast(&w), &spec).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    fn w_cast(w: &ConvWeights<f64>) -> ConvWeights<f32> {
        ConvWeights {
            weight: w.weight.iter().map(|&v| v as f32).collect(),
            bias: w.bias.iter().map(|&v| v as f32).collect(),
        }
    }

    #[test]
    fn sparse_and_dense_paths_agree_with_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for density in [0.02, 0.5, 1.0] {
            let spec = ConvSpec::new([3, 3, 2], [2, 1, 2], Padding::Same, 3, 4);
            let x: Tensor4<f64> = random_tensor(&mut rng, Shape4::new(3, 7, 5, 6), density);
            let w = random_weights(&mut rng, &spec);
            let want = oracle(&x, &w, &spec);
            let got = conv3d(&x, &w, &spec).unwrap();
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_empty_output() {
        let spec = ConvSpec::new([3, 3, 3], [1, 1, 1], Padding::Valid, 2, 1);
        let w = ConvWeights::<f32>::zeros(&spec);
        let x = Tensor4::<f32>::zeros((3, 4, 4, 4));
        assert!(matches!(conv3d(&x, &w, &spec), Err(TensorError::Shape(_))));
        let x = Tensor4::<f32>::zeros((2, 2, 4, 4));
        assert!(matches!(conv3d(&x, &w, &spec), Err(TensorError::EmptyOutput(_))));
    }

    #[test]
    fn grad_of_zero_upstream_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ConvSpec::cube(3, 2, 2);
        let x: Tensor4<f32> = random_tensor(&mut rng, Shape4::new(2, 4, 5, 5), 1.0);
        let w = random_weights(&mut rng, &spec);
        let up = Tensor4::zeros(spec.output_shape(x.shape()).unwrap());
        let g = conv3d_grad(&x, &w, &up, &spec).unwrap();
        assert!(g.input.data().iter().all(|v| *v == 0.0));
        assert!(g.weight.iter().all(|v| *v == 0.0));
        assert!(g.bias.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_grad_passes_upstream_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec::pointwise(1, 1);
        let x: Tensor4<f32> = random_tensor(&mut rng, Shape4::new(1, 3, 4, 4), 1.0);
        let up: Tensor4<f32> = random_tensor(&mut rng, Shape4::new(1, 3, 4, 4), 1.0);
        let w = ConvWeights { weight: vec![1.0], bias: vec![0.0] };
        let g = conv3d_grad(&x, &w, &up, &spec).unwrap();
        assert_eq!(g.input, up);
    }

    #[test]
    fn grad_rejects_wrong_upstream_shape() {
        let spec = ConvSpec::cube(3, 1, 1);
        let w = ConvWeights::<f32>::zeros(&spec);
        let x = Tensor4::<f32>::zeros((1, 4, 4, 4));
        let up = Tensor4::<f32>::zeros((1, 3, 4, 4));
        assert!(conv3d_grad(&x, &w, &up, &spec).is_err());
    }
}
