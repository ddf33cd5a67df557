//! Dense rank-4 activation storage and the numerical kernels the network is
//! built from.
//!
//! Everything is laid out channel-major: `(channel, frame, height, width)`
//! with width varying fastest. Kernels are generic over [`Scalar`] so the
//! same code runs in single precision for training and in double precision
//! for gradient verification.

mod conv;
mod image;
mod pool;

pub use conv::{conv3d, conv3d_grad, ConvGrads, ConvSpec, ConvWeights, Padding};
pub use image::{bilinear_resize, hflip, rotate2d, Grid2, RotationMap};
pub use pool::{
    avgpool3d, avgpool3d_grad, avgpool_output, maxpool3d, maxpool3d_grad, maxpool_output, PoolIndices,
};

pub(crate) use conv::{conv_backward_into, conv_forward_into, ConvScratch};
pub(crate) use pool::{avgpool_backward_into, avgpool_forward_into};
pub(crate) use pool::{maxpool_backward_into, maxpool_forward_into};

use std::fmt;

use num_traits::{Float, NumAssign};
use serde::{Deserialize, Serialize};

/// Errors raised by tensor construction and the kernels in this module.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty output: {0}")]
    EmptyOutput(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Floating-point element type of tensors and kernels.
pub trait Scalar:
    Float + NumAssign + Default + fmt::Debug + Send + Sync + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );
}

fn gemm_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // strides of op(x) where x is stored row-major
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($ty:ty, $gemm:path) => {
        impl Scalar for $ty {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $ty
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, trans_a);
                let (rsb, csb) = gemm_strides(k, n, trans_b);
                // SAFETY: bounds asserted above; strides describe the
                // row-major (or transposed row-major) operands exactly.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Extent of a rank-4 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(c: usize, t: usize, h: usize, w: usize) -> Self {
        Shape4 { c, t, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one channel (`t * h * w`).
    pub fn plane(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn frame(&self) -> usize {
        self.h * self.w
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape4 { c, ..self }
    }

    #[inline]
    pub fn index(&self, c: usize, t: usize, h: usize, w: usize) -> usize {
        ((c * self.t + t) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.c, self.t, self.h, self.w)
    }
}

impl From<(usize, usize, usize, usize)> for Shape4 {
    fn from((c, t, h, w): (usize, usize, usize, usize)) -> Self {
        Shape4 { c, t, h, w }
    }
}

/// Dense `(channel, frame, height, width)` array.
#[derive(Clone, PartialEq)]
pub struct Tensor4<T = f32> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        let shape = shape.into();
        Tensor4 {
            data: vec![T::zero(); shape.len()],
            shape,
        }
    }

    pub fn full(shape: impl Into<Shape4>, value: T) -> Self {
        let shape = shape.into();
        Tensor4 {
            data: vec![value; shape.len()],
            shape,
        }
    }

    pub fn from_vec(shape: impl Into<Shape4>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.len() {
            return Err(TensorError::Shape(format!(
                "{} elements supplied for shape {shape} ({} expected)",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn from_fn(shape: impl Into<Shape4>, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.c {
            for t in 0..shape.t {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(c, t, h, w));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(c, t, h, w)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, t: usize, h: usize, w: usize, v: T) {
        let i = self.shape.index(c, t, h, w);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    /// One `h x w` frame of one channel.
    pub fn frame(&self, c: usize, t: usize) -> &[T] {
        let f = self.shape.frame();
        let start = (c * self.shape.t + t) * f;
        &self.data[start..start + f]
    }

    pub fn frame_mut(&mut self, c: usize, t: usize) -> &mut [T] {
        let f = self.shape.frame();
        let start = (c * self.shape.t + t) * f;
        &mut self.data[start..start + f]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts element type (used to lift f32 data into double mode).
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Builds a tensor whose frame `i` is `self` frame `frames[i]` for every channel.
    pub fn gather_frames(&self, frames: &[usize]) -> Self {
        let s = self.shape;
        let out_shape = Shape4::new(s.c, frames.len(), s.h, s.w);
        let mut data = Vec::with_capacity(out_shape.len());
        for c in 0..s.c {
            for &f in frames {
                data.extend_from_slice(self.frame(c, f));
            }
        }
        Tensor4 {
            shape: out_shape,
            data,
        }
    }
}

/// A stack of equally shaped [`Tensor4`] samples: `(n, c, t, h, w)`.
#[derive(Clone, PartialEq)]
pub struct Batch<T = f32> {
    n: usize,
    shape: Shape4,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Batch<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Batch")
            .field("n", &self.n)
            .field("shape", &self.shape)
            .finish()
    }
}

impl<T: Scalar> Batch<T> {
    pub fn zeros(n: usize, shape: Shape4) -> Self {
        Batch {
            n,
            shape,
            data: vec![T::zero(); n * shape.len()],
        }
    }

    pub fn from_vec(n: usize, shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != n * shape.len() {
            return Err(TensorError::Shape(format!(
                "{} elements supplied for batch of {n} x {shape}",
                data.len()
            )));
        }
        Ok(Batch { n, shape, data })
    }

    /// Stacks samples along a new leading axis. All samples must share a shape.
    pub fn stack(samples: &[Tensor4<T>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| TensorError::Invalid("cannot stack zero samples".into()))?;
        let shape = first.shape();
        let mut data = Vec::with_capacity(samples.len() * shape.len());
        for (i, s) in samples.iter().enumerate() {
            if s.shape() != shape {
                return Err(TensorError::Shape(format!(
                    "sample {i} has shape {} but sample 0 has {shape}",
                    s.shape()
                )));
            }
            data.extend_from_slice(s.data());
        }
        Ok(Batch {
            n: samples.len(),
            shape,
            data,
        })
    }

    pub fn single(sample: Tensor4<T>) -> Self {
        Batch {
            n: 1,
            shape: sample.shape,
            data: sample.data,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    /// Five-axis extent `(n, c, t, h, w)`.
    pub fn dims(&self) -> [usize; 5] {
        [self.n, self.shape.c, self.shape.t, self.shape.h, self.shape.w]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let l = self.shape.len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let l = self.shape.len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn to_tensor(&self, i: usize) -> Tensor4<T> {
        Tensor4 {
            shape: self.shape,
            data: self.sample(i).to_vec(),
        }
    }

    pub fn unstack(&self) -> Vec<Tensor4<T>> {
        (0..self.n).map(|i| self.to_tensor(i)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        Batch {
            n: self.n,
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Output extent and leading pad of a windowed op along one axis.
pub(crate) fn window_extent(
    n: usize,
    k: usize,
    s: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    if k == 0 || s == 0 {
        return None;
    }
    match padding {
        Padding::Same => {
            if n == 0 {
                return None;
            }
            let out = n.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(n);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if n < k {
                None
            } else {
                Some(((n - k) / s + 1, 0))
            }
        }
    }
}
