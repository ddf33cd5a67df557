use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use super::config::{HeadSpec, InceptionParams, PoolSpec};
use super::NetError;
use crate::tensor::{
    avgpool_backward_into, avgpool_forward_into, avgpool_output, conv_backward_into, conv_forward_into,
    maxpool_backward_into, maxpool_forward_into, maxpool_output, Batch, ConvScratch, ConvSpec, Scalar, Shape4,
};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;
pub const INIT_STD: f64 = 0.01;

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

pub(crate) fn gaussian<T: Scalar>(rng: &mut impl Rng, n: usize) -> Vec<T> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..n).map(|_| T::from_f64(normal.sample(rng))).collect()
}

/// Collects named views of every stored tensor, in a fixed order.
pub(crate) trait Tensors<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>);
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>);
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running statistics.
    Training,
    /// Normalize with the running statistics.
    Inference,
}

/// Which side of each ReLU and max-pool kink the last training forward
/// landed on: ReLU active bits and pool argmax offsets, in layer order.
pub(crate) trait Kinks {
    fn kinks(&self, out: &mut Vec<u32>);
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    plane: usize,
    relu: bool,
}

/// Per-channel batch normalization over `(batch, t, h, w)`.
#[derive(Debug, Clone)]
pub struct BatchNorm<T = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    cache: Option<BnCache<T>>,
    /// Batches folded into an equal-weight average so far; `None` means
    /// the usual momentum update.
    averaged: Option<usize>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(vec![T::one(); channels]),
            beta: Param::new(vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            cache: None,
            averaged: None,
        }
    }

    /// Switches training forwards from the momentum update to an
    /// equal-weight average over the batches that follow; the first such
    /// batch discards the current running statistics.
    pub(crate) fn begin_averaging(&mut self) {
        self.averaged = Some(0);
    }

    pub(crate) fn end_averaging(&mut self) {
        self.averaged = None;
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn check(&self, x: &Batch<T>) -> Result<(), NetError> {
        if x.shape().c != self.channels() {
            return Err(NetError::InputShape(format!(
                "batch norm over {} channels given input {}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Batch<T>, mode: BnMode) -> Result<Batch<T>, NetError> {
        self.check(x)?;
        let mut y = x.clone();
        match mode {
            BnMode::Training => self.train_in_place(&mut y, false),
            BnMode::Inference => self.infer_in_place(&mut y, false),
        }
        Ok(y)
    }

    /// Gradient with respect to the input of the last training-mode forward;
    /// gain and offset gradients are accumulated.
    pub fn backward(&mut self, dy: &Batch<T>) -> Result<Batch<T>, NetError> {
        let mut d = dy.clone();
        self.backward_in_place(&mut d, false)?;
        Ok(d)
    }

    pub(crate) fn infer_in_place(&self, x: &mut Batch<T>, relu: bool) {
        let s = x.shape();
        let plane = s.plane();
        let eps = T::from_f64(BN_EPSILON);
        for i in 0..x.len() {
            let sample = x.sample_mut(i);
            for c in 0..s.c {
                let inv = T::one() / (self.running_var[c] + eps).sqrt();
                let scale = self.gamma.value[c] * inv;
                let shift = self.beta.value[c] - self.running_mean[c] * scale;
                for v in &mut sample[c * plane..(c + 1) * plane] {
                    let y = *v * scale + shift;
                    *v = if relu && y < T::zero() { T::zero() } else { y };
                }
            }
        }
    }

    pub(crate) fn train_in_place(&mut self, x: &mut Batch<T>, relu: bool) {
        let s = x.shape();
        let plane = s.plane();
        let n = x.len();
        let count = (n * plane) as f64;
        let mut inv_std = vec![T::zero(); s.c];
        let keep = match self.averaged {
            Some(k) => k as f64 / (k + 1) as f64,
            None => BN_MOMENTUM,
        };
        for c in 0..s.c {
            let mut sum = 0.0f64;
            for i in 0..n {
                sum += x.sample(i)[c * plane..(c + 1) * plane].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0f64;
            for i in 0..n {
                sq += x.sample(i)[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            let var = sq / count;
            let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
            self.running_mean[c] =
                T::from_f64(keep * self.running_mean[c].as_f64() + (1.0 - keep) * mean);
            self.running_var[c] =
                T::from_f64(keep * self.running_var[c].as_f64() + (1.0 - keep) * unbiased);
            inv_std[c] = T::from_f64(1.0 / (var + BN_EPSILON).sqrt());
            let m = T::from_f64(mean);
            for i in 0..n {
                for v in &mut x.sample_mut(i)[c * plane..(c + 1) * plane] {
                    *v = (*v - m) * inv_std[c];
                }
            }
        }
        if let Some(k) = &mut self.averaged {
            *k += 1;
        }
        let x_hat = x.data().to_vec();
        for i in 0..n {
            let sample = x.sample_mut(i);
            for c in 0..s.c {
                let (g, b) = (self.gamma.value[c], self.beta.value[c]);
                for v in &mut sample[c * plane..(c + 1) * plane] {
                    let y = *v * g + b;
                    *v = if relu && y < T::zero() { T::zero() } else { y };
                }
            }
        }
        self.cache = Some(BnCache {
            x_hat,
            inv_std,
            plane,
            relu,
        });
    }

    /// Replaces `dy` (gradient w.r.t. the post-activation output) with the
    /// gradient w.r.t. the normalization input.
    pub(crate) fn backward_in_place(&mut self, dy: &mut Batch<T>, relu: bool) -> Result<(), NetError> {
        let cache = self.cache.take().ok_or(NetError::MissingForward("batch norm"))?;
        let s = dy.shape();
        let plane = s.plane();
        let n = dy.len();
        if cache.x_hat.len() != dy.data().len() {
            return Err(NetError::InputShape(format!(
                "batch norm backward given {} gradient values for {} cached activations",
                dy.data().len(),
                cache.x_hat.len()
            )));
        }
        let count = T::from_f64((n * plane) as f64);
        for c in 0..s.c {
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..n {
                let off = i * s.len() + c * plane;
                let xh = &cache.x_hat[off..off + plane];
                for (d, &xv) in dy.sample_mut(i)[c * plane..(c + 1) * plane].iter_mut().zip(xh) {
                    if relu && xv * g + b <= T::zero() {
                        *d = T::zero();
                    }
                    sum_dy += *d;
                    sum_dy_xhat += *d * xv;
                }
            }
            self.gamma.grad[c] += sum_dy_xhat;
            self.beta.grad[c] += sum_dy;
            let k = g * cache.inv_std[c] / count;
            for i in 0..n {
                let off = i * s.len() + c * plane;
                let xh = &cache.x_hat[off..off + plane];
                for (d, &xv) in dy.sample_mut(i)[c * plane..(c + 1) * plane].iter_mut().zip(xh) {
                    *d = k * (count * *d - sum_dy - xv * sum_dy_xhat);
                }
            }
        }
        Ok(())
    }

    pub(crate) fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl<T: Scalar> Kinks for BatchNorm<T> {
    fn kinks(&self, out: &mut Vec<u32>) {
        let Some(cache) = self.cache.as_ref().filter(|c| c.relu) else {
            return;
        };
        let channels = self.gamma.value.len();
        for (e, &xh) in cache.x_hat.iter().enumerate() {
            let c = (e / cache.plane) % channels;
            out.push((xh * self.gamma.value[c] + self.beta.value[c] > T::zero()) as u32);
        }
    }
}

impl<T: Scalar> Tensors<T> for BatchNorm<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma.value));
        out.push((format!("{prefix}.beta"), &self.beta.value));
        out.push((format!("{prefix}.running_mean"), &self.running_mean));
        out.push((format!("{prefix}.running_var"), &self.running_var));
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma.value));
        out.push((format!("{prefix}.beta"), &mut self.beta.value));
        out.push((format!("{prefix}.running_mean"), &mut self.running_mean));
        out.push((format!("{prefix}.running_var"), &mut self.running_var));
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

/// Convolution followed by batch normalization and ReLU.
#[derive(Debug, Clone)]
pub(crate) struct ConvUnit<T> {
    pub spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> ConvUnit<T> {
    pub fn new(spec: ConvSpec, rng: &mut impl Rng) -> Self {
        ConvUnit {
            weight: Param::new(gaussian(rng, spec.weight_len())),
            bias: Param::new(vec![T::zero(); spec.out_channels]),
            bn: BatchNorm::new(spec.out_channels),
            spec,
        }
    }

    fn conv(&self, x: &Batch<T>) -> Result<Batch<T>, NetError> {
        let g = self.spec.geometry(x.shape())?;
        let mut out = Batch::zeros(x.len(), g.output);
        let mut scratch = ConvScratch::new();
        for i in 0..x.len() {
            conv_forward_into(
                x.sample(i),
                &g,
                &self.weight.value,
                &self.bias.value,
                out.sample_mut(i),
                &mut scratch,
            );
        }
        Ok(out)
    }

    pub fn infer(&self, x: &Batch<T>) -> Result<Batch<T>, NetError> {
        let mut y = self.conv(x)?;
        self.bn.infer_in_place(&mut y, true);
        Ok(y)
    }

    pub fn train(&mut self, x: &Batch<T>) -> Result<Batch<T>, NetError> {
        let mut y = self.conv(x)?;
        self.bn.train_in_place(&mut y, true);
        Ok(y)
    }

    /// `x` must be the input of the matching [`train`](Self::train) call.
    pub fn backward(&mut self, x: &Batch<T>, mut dy: Batch<T>, need_dx: bool) -> Result<Option<Batch<T>>, NetError> {
        self.bn.backward_in_place(&mut dy, true)?;
        let g = self.spec.geometry(x.shape())?;
        let mut dx = need_dx.then(|| Batch::zeros(x.len(), g.input));
        let mut scratch = ConvScratch::new();
        for i in 0..x.len() {
            conv_backward_into(
                x.sample(i),
                &g,
                &self.weight.value,
                dy.sample(i),
                &mut self.weight.grad,
                &mut self.bias.grad,
                dx.as_mut().map(|d| d.sample_mut(i)),
                &mut scratch,
            );
        }
        Ok(dx)
    }
}

impl<T: Scalar> Kinks for ConvUnit<T> {
    fn kinks(&self, out: &mut Vec<u32>) {
        self.bn.kinks(out);
    }
}

impl<T: Scalar> Tensors<T> for ConvUnit<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        out.push((format!("{prefix}.conv.weight"), &self.weight.value));
        out.push((format!("{prefix}.conv.bias"), &self.bias.value));
        self.bn.tensors(&format!("{prefix}.bn"), out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        out.push((format!("{prefix}.conv.weight"), &mut self.weight.value));
        out.push((format!("{prefix}.conv.bias"), &mut self.bias.value));
        self.bn.tensors_mut(&format!("{prefix}.bn"), out);
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
        self.bn.params_mut(out);
    }
}

pub(crate) fn concat_channels<T: Scalar>(parts: &[&Batch<T>]) -> Batch<T> {
    let n = parts[0].len();
    let s = parts[0].shape();
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let shape = s.with_channels(c);
    let mut data = Vec::with_capacity(n * shape.len());
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.sample(i));
        }
    }
    Batch::from_vec(n, shape, data).expect("concat sizes agree")
}

pub(crate) fn split_channels<T: Scalar>(x: &Batch<T>, widths: &[usize]) -> Vec<Batch<T>> {
    let s = x.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(widths.len());
    let mut c0 = 0;
    for &w in widths {
        let shape = s.with_channels(w);
        let mut data = Vec::with_capacity(x.len() * shape.len());
        for i in 0..x.len() {
            data.extend_from_slice(&x.sample(i)[c0 * plane..(c0 + w) * plane]);
        }
        out.push(Batch::from_vec(x.len(), shape, data).expect("split sizes agree"));
        c0 += w;
    }
    out
}

fn add_into<T: Scalar>(acc: &mut Batch<T>, x: &Batch<T>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(x.data()) {
        *a += b;
    }
}

const BRANCH_POOL: [usize; 3] = [3, 3, 3];
const UNIT_STRIDE: [usize; 3] = [1, 1, 1];

#[derive(Debug, Clone)]
struct PoolCache<T> {
    input: Shape4,
    output: Shape4,
    argmax: Vec<u32>,
    _marker: std::marker::PhantomData<T>,
}

fn maxpool_batch<T: Scalar>(
    x: &Batch<T>,
    window: [usize; 3],
    stride: [usize; 3],
) -> Result<(Batch<T>, PoolCache<T>), NetError> {
    let out_shape = maxpool_output(x.shape(), window, stride)?;
    let mut out = Batch::zeros(x.len(), out_shape);
    let mut argmax = vec![0u32; x.len() * out_shape.len()];
    for i in 0..x.len() {
        let l = out_shape.len();
        maxpool_forward_into(
            x.sample(i),
            x.shape(),
            window,
            stride,
            out.sample_mut(i),
            &mut argmax[i * l..(i + 1) * l],
        )?;
    }
    let cache = PoolCache {
        input: x.shape(),
        output: out_shape,
        argmax,
        _marker: std::marker::PhantomData,
    };
    Ok((out, cache))
}

fn maxpool_batch_backward<T: Scalar>(dy: &Batch<T>, cache: &PoolCache<T>) -> Batch<T> {
    let mut dx = Batch::zeros(dy.len(), cache.input);
    let l = cache.output.len();
    for i in 0..dy.len() {
        maxpool_backward_into(
            dy.sample(i),
            cache.input,
            cache.output,
            &cache.argmax[i * l..(i + 1) * l],
            dx.sample_mut(i),
        );
    }
    dx
}

#[derive(Debug, Clone)]
struct InceptionCache<T> {
    x: Batch<T>,
    r2: Batch<T>,
    r3: Batch<T>,
    pooled: Batch<T>,
    pool: PoolCache<T>,
}

/// Four-branch inflated inception module.
#[derive(Debug, Clone)]
pub(crate) struct Inception<T> {
    pub widths: InceptionParams,
    pub in_channels: usize,
    b1: ConvUnit<T>,
    b2_reduce: ConvUnit<T>,
    b2: ConvUnit<T>,
    b3_reduce: ConvUnit<T>,
    b3: ConvUnit<T>,
    b4: ConvUnit<T>,
    cache: Option<InceptionCache<T>>,
}

impl<T: Scalar> Inception<T> {
    pub fn new(in_channels: usize, p: InceptionParams, rng: &mut impl Rng) -> Self {
        Inception {
            widths: p,
            in_channels,
            b1: ConvUnit::new(ConvSpec::pointwise(in_channels, p.b1), rng),
            b2_reduce: ConvUnit::new(ConvSpec::pointwise(in_channels, p.b2_reduce), rng),
            b2: ConvUnit::new(ConvSpec::cube(3, p.b2_reduce, p.b2), rng),
            b3_reduce: ConvUnit::new(ConvSpec::pointwise(in_channels, p.b3_reduce), rng),
            b3: ConvUnit::new(ConvSpec::cube(3, p.b3_reduce, p.b3), rng),
            b4: ConvUnit::new(ConvSpec::pointwise(in_channels, p.b4), rng),
            cache: None,
        }
    }

    fn check(&self, x: &Batch<T>) -> Result<(), NetError> {
        if x.shape().c != self.in_channels {
            return Err(NetError::InputShape(format!(
                "inception module expects {} channels, input is {}",
                self.in_channels,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn infer(&self, x: &Batch<T>) -> Result<Batch<T>, NetError> {
        self.check(x)?;
        let y1 = self.b1.infer(x)?;
        let y2 = self.b2.infer(&self.b2_reduce.infer(x)?)?;
        let y3 = self.b3.infer(&self.b3_reduce.infer(x)?)?;
        let (pooled, _) = maxpool_batch(x, BRANCH_POOL, UNIT_STRIDE)?;
        let y4 = self.b4.infer(&pooled)?;
        Ok(concat_channels(&[&y1, &y2, &y3, &y4]))
    }

    pub fn train(&mut self, x: &Batch<T>) -> Result<Batch<T>, NetError> {
        self.check(x)?;
        let y1 = self.b1.train(x)?;
        let r2 = self.b2_reduce.train(x)?;
        let y2 = self.b2.train(&r2)?;
        let r3 = self.b3_reduce.train(x)?;
        let y3 = self.b3.train(&r3)?;
        let (pooled, pool) = maxpool_batch(x, BRANCH_POOL, UNIT_STRIDE)?;
        let y4 = self.b4.train(&pooled)?;
        let y = concat_channels(&[&y1, &y2, &y3, &y4]);
        self.cache = Some(InceptionCache {
            x: x.clone(),
            r2,
            r3,
            pooled,
            pool,
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Batch<T>) -> Result<Batch<T>, NetError> {
        let cache = self.cache.take().ok_or(NetError::MissingForward("inception module"))?;
        let p = self.widths;
        let mut parts = split_channels(dy, &[p.b1, p.b2, p.b3, p.b4]).into_iter();
        let (d1, d2, d3, d4) = (
            parts.next().unwrap(),
            parts.next().unwrap(),
            parts.next().unwrap(),
            parts.next().unwrap(),
        );
        let mut dx = self.b1.backward(&cache.x, d1, true)?.expect("dx requested");
        let dr2 = self.b2.backward(&cache.r2, d2, true)?.expect("dx requested");
        add_into(&mut dx, &self.b2_reduce.backward(&cache.x, dr2, true)?.expect("dx requested"));
        let dr3 = self.b3.backward(&cache.r3, d3, true)?.expect("dx requested");
        add_into(&mut dx, &self.b3_reduce.backward(&cache.x, dr3, true)?.expect("dx requested"));
        let dpooled = self.b4.backward(&cache.pooled, d4, true)?.expect("dx requested");
        add_into(&mut dx, &maxpool_batch_backward(&dpooled, &cache.pool));
        Ok(dx)
    }

    fn units(&self) -> [(&'static str, &ConvUnit<T>); 6] {
        [
            ("b1", &self.b1),
            ("b2_reduce", &self.b2_reduce),
            ("b2", &self.b2),
            ("b3_reduce", &self.b3_reduce),
            ("b3", &self.b3),
            ("b4", &self.b4),
        ]
    }

    fn units_mut(&mut self) -> [(&'static str, &mut ConvUnit<T>); 6] {
        [
            ("b1", &mut self.b1),
            ("b2_reduce", &mut self.b2_reduce),
            ("b2", &mut self.b2),
            ("b3_reduce", &mut self.b3_reduce),
            ("b3", &mut self.b3),
            ("b4", &mut self.b4),
        ]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        for (_, u) in self.units_mut() {
            u.bn.clear_cache();
        }
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        self.units_mut().into_iter().map(|(_, u)| &mut u.bn).collect()
    }
}

impl<T: Scalar> Kinks for Inception<T> {
    fn kinks(&self, out: &mut Vec<u32>) {
        for (_, u) in self.units() {
            u.kinks(out);
        }
        if let Some(cache) = &self.cache {
            out.extend_from_slice(&cache.pool.argmax);
        }
    }
}

impl<T: Scalar> Tensors<T> for Inception<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        for (name, u) in self.units() {
            u.tensors(&format!("{prefix}.{name}"), out);
        }
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        for (name, u) in self.units_mut() {
            u.tensors_mut(&format!("{prefix}.{name}"), out);
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        for (_, u) in self.units_mut() {
            u.params_mut(out);
        }
    }
}

/// Same-padded max pool between stages.
#[derive(Debug, Clone)]
pub(crate) struct MaxPoolLayer<T> {
    pub spec: PoolSpec,
    cache: Option<PoolCache<T>>,
}

impl<T: Scalar> Kinks for MaxPoolLayer<T> {
    fn kinks(&self, out: &mut Vec<u32>) {
        if let Some(cache) = &self.cache {
            out.extend_from_slice(&cache.argmax);
        }
    }
}

impl<T: Scalar> MaxPoolLayer<T> {
    pub fn new(spec: PoolSpec) -> Self {
        MaxPoolLayer { spec, cache: None }
    }

    pub fn infer(&self, x: &Batch<T>) -> Result<Batch<T>, NetError> {
        Ok(maxpool_batch(x, self.spec.window, self.spec.stride)?.0)
    }

    pub fn train(&mut self, x: &Batch<T>) -> Result<Batch<T>, NetError> {
        let (y, cache) = maxpool_batch(x, self.spec.window, self.spec.stride)?;
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Batch<T>) -> Result<Batch<T>, NetError> {
        let cache = self.cache.take().ok_or(NetError::MissingForward("max pool"))?;
        Ok(maxpool_batch_backward(dy, &cache))
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[derive(Debug, Clone)]
struct HeadCache<T> {
    input: Shape4,
    pooled: Shape4,
    features: Batch<T>,
    mask: Vec<T>,
}

/// Average pool, dropout and the 1x1x1 class-score convolution.
#[derive(Debug, Clone)]
pub(crate) struct Head<T> {
    pub spec: HeadSpec,
    pub dropout_rate: f64,
    pub logits: ConvSpec,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<HeadCache<T>>,
}

impl<T: Scalar> Head<T> {
    pub fn new(spec: HeadSpec, in_channels: usize, num_classes: usize, dropout_rate: f64, rng: &mut impl Rng) -> Self {
        let logits = ConvSpec::pointwise(in_channels, num_classes);
        Head {
            spec,
            dropout_rate,
            weight: Param::new(gaussian(rng, logits.weight_len())),
            bias: Param::new(vec![T::zero(); num_classes]),
            logits,
            cache: None,
        }
    }

    fn pool(&self, x: &Batch<T>) -> Result<Batch<T>, NetError> {
        let out = avgpool_output(x.shape(), self.spec.window, self.spec.stride)?;
        let mut y = Batch::zeros(x.len(), out);
        for i in 0..x.len() {
            avgpool_forward_into(x.sample(i), x.shape(), self.spec.window, self.spec.stride, y.sample_mut(i))?;
        }
        Ok(y)
    }

    fn scores(&self, features: &Batch<T>) -> Result<Batch<T>, NetError> {
        let g = self.logits.geometry(features.shape())?;
        let mut out = Batch::zeros(features.len(), g.output);
        let mut scratch = ConvScratch::new();
        for i in 0..features.len() {
            conv_forward_into(
                features.sample(i),
                &g,
                &self.weight.value,
                &self.bias.value,
                out.sample_mut(i),
                &mut scratch,
            );
        }
        Ok(out)
    }

    pub fn infer(&self, x: &Batch<T>) -> Result<Batch<T>, NetError> {
        self.scores(&self.pool(x)?)
    }

    pub fn train(&mut self, x: &Batch<T>, rng: &mut dyn RngCore) -> Result<Batch<T>, NetError> {
        let mut features = self.pool(x)?;
        let mask = dropout_mask(features.data().len(), self.dropout_rate, rng);
        for (f, &m) in features.data_mut().iter_mut().zip(&mask) {
            *f *= m;
        }
        let y = self.scores(&features)?;
        self.cache = Some(HeadCache {
            input: x.shape(),
            pooled: features.shape(),
            features,
            mask,
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Batch<T>) -> Result<Batch<T>, NetError> {
        let cache = self.cache.take().ok_or(NetError::MissingForward("head"))?;
        let g = self.logits.geometry(cache.pooled)?;
        let mut dfeat = Batch::zeros(dy.len(), cache.pooled);
        let mut scratch = ConvScratch::new();
        for i in 0..dy.len() {
            conv_backward_into(
                cache.features.sample(i),
                &g,
                &self.weight.value,
                dy.sample(i),
                &mut self.weight.grad,
                &mut self.bias.grad,
                Some(dfeat.sample_mut(i)),
                &mut scratch,
            );
        }
        for (d, &m) in dfeat.data_mut().iter_mut().zip(&cache.mask) {
            *d *= m;
        }
        let mut dx = Batch::zeros(dy.len(), cache.input);
        for i in 0..dy.len() {
            avgpool_backward_into(
                dfeat.sample(i),
                cache.input,
                cache.pooled,
                self.spec.window,
                self.spec.stride,
                dx.sample_mut(i),
            );
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl<T: Scalar> Tensors<T> for Head<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Vec<T>)>) {
        out.push((format!("{prefix}.logits.weight"), &self.weight.value));
        out.push((format!("{prefix}.logits.bias"), &self.bias.value));
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Vec<T>)>) {
        out.push((format!("{prefix}.logits.weight"), &mut self.weight.value));
        out.push((format!("{prefix}.logits.bias"), &mut self.bias.value));
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Inverted-dropout multipliers: `0` with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask<T: Scalar>(len: usize, rate: f64, rng: &mut dyn RngCore) -> Vec<T> {
    if rate <= 0.0 {
        return vec![T::one(); len];
    }
    if rate >= 1.0 {
        return vec![T::zero(); len];
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, shape: Shape4) -> Batch<f64> {
        let data = (0..n * shape.len()).map(|_| rng.random_range(-2.0..3.0)).collect();
        Batch::from_vec(n, shape, data).unwrap()
    }

    #[test]
    fn training_batch_norm_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_batch(&mut rng, 3, Shape4::new(2, 4, 3, 3));
        let mut bn = BatchNorm::<f64>::new(2);
        let y = bn.forward(&x, BnMode::Training).unwrap();
        let plane = y.shape().plane();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|i| y.sample(i)[c * plane..(c + 1) * plane].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_channel_maps_to_offset() {
        let x = Batch::from_vec(2, Shape4::new(1, 2, 2, 2), vec![3.5f32; 16]).unwrap();
        let mut bn = BatchNorm::<f32>::new(1);
        bn.beta.value[0] = 0.25;
        let y = bn.forward(&x, BnMode::Training).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn inference_with_unit_stats_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_batch(&mut rng, 2, Shape4::new(3, 2, 2, 2)).cast::<f32>();
        let mut bn = BatchNorm::<f32>::new(3);
        let y = bn.forward(&x, BnMode::Inference).unwrap();
        let scale = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((*a as f64 * scale - *b as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn running_stats_only_move_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_batch(&mut rng, 2, Shape4::new(1, 2, 2, 2));
        let mut bn = BatchNorm::<f64>::new(1);
        bn.forward(&x, BnMode::Inference).unwrap();
        assert_eq!((bn.running_mean[0], bn.running_var[0]), (0.0, 1.0));
        bn.forward(&x, BnMode::Training).unwrap();
        assert_ne!(bn.running_mean[0], 0.0);
    }

    #[test]
    fn batch_norm_rejects_channel_mismatch() {
        let x = Batch::<f32>::zeros(1, Shape4::new(2, 1, 1, 1));
        assert!(BatchNorm::<f32>::new(3).forward(&x, BnMode::Training).is_err());
    }

    #[test]
    fn backward_without_forward_is_rejected() {
        let mut bn = BatchNorm::<f32>::new(1);
        let dy = Batch::zeros(1, Shape4::new(1, 1, 1, 1));
        assert!(matches!(bn.backward(&dy), Err(NetError::MissingForward(_))));
    }

    #[test]
    fn inception_concat_width_and_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = Inception::<f32>::new(6, InceptionParams::new(2, (2, 3), (1, 2), 2), &mut rng);
        for shape in [Shape4::new(6, 1, 1, 1), Shape4::new(6, 3, 5, 4)] {
            let x = Batch::zeros(2, shape);
            let y = m.infer(&x).unwrap();
            assert_eq!(y.shape(), shape.with_channels(9));
            // zero input, zero bias/offset: zero output
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn inception_rejects_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = Inception::<f32>::new(6, InceptionParams::new(2, (2, 3), (1, 2), 2), &mut rng);
        assert!(m.infer(&Batch::zeros(1, Shape4::new(5, 2, 2, 2))).is_err());
    }

    #[test]
    fn dropout_rate_zero_is_identity_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        assert!(dropout_mask::<f32>(100, 0.0, &mut rng).iter().all(|&m| m == 1.0));
    }
}
