//! Finite-difference verification of every backward pass, in double precision.
//!
//! Each layer check draws a random projection `r` of the layer output and
//! compares the analytic gradient of `sum(r * f(x))` with central
//! differences, entry by entry, for the input and every parameter. Network
//! checks use the batch cross-entropy directly.
//!
//! A difference whose two evaluations fall on different sides of a ReLU or
//! max-pool kink measures the jump, not the slope. Those entries are
//! re-differenced with a step shrunk tenfold at a time until both sides
//! share the base point's kink pattern. Each derivative combines central
//! differences at the step and half the step (one Richardson extrapolation
//! step), which cancels the second-order truncation term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batch_loss, TrainError};
use crate::net::{
    BatchNorm, BnMode, Head, HeadSpec, Inception, InceptionParams, Network, NetworkConfig, Param, PoolSpec, StageSpec,
    StemSpec, Tensors,
};
use crate::net::Kinks;
use crate::tensor::{
    avgpool3d, avgpool3d_grad, conv3d, conv3d_grad, maxpool3d, maxpool3d_grad, Batch, ConvSpec, ConvWeights, Padding,
    Shape4, Tensor4,
};

/// Central-difference step.
pub const EPSILON: f64 = 1e-4;
/// Smallest step tried when differences straddle a kink.
pub const MIN_EPSILON: f64 = 1e-8;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// Number of gradient entries compared.
    pub entries: usize,
    /// Worst `|a - n| / max(|a|, |n|, floor)` over entries, where `floor` is
    /// 1e-3 of the largest gradient magnitude in the same layer. Entries far
    /// below that scale (conv biases ahead of batch norm, whose true gradient
    /// is zero) are compared absolutely against it.
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn compare(name: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> GradCheck {
    compare_at_scale(name, analytic, numeric, max_abs(analytic).max(max_abs(numeric)))
}

fn compare_at_scale(name: impl Into<String>, analytic: &[f64], numeric: &[f64], scale: f64) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len());
    let floor = (scale * 1e-3).max(1e-12);
    let max_rel_error = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max);
    GradCheck {
        name: name.into(),
        entries: analytic.len(),
        max_rel_error,
    }
}

/// A loss value and the kink pattern it was evaluated on (empty for smooth
/// functions).
type Probe = (f64, Vec<u32>);

fn smooth(v: f64) -> Probe {
    (v, Vec::new())
}

/// Central differences of `loss` over the `len` entries that
/// `perturb(state, j, delta)` shifts.
fn numeric<S: Clone>(
    state: &S,
    len: usize,
    perturb: impl Fn(&mut S, usize, f64),
    loss: impl Fn(&mut S) -> Probe,
) -> Vec<f64> {
    let (_, base) = loss(&mut state.clone());
    let eval = |j: usize, delta: f64| {
        let mut s = state.clone();
        perturb(&mut s, j, delta);
        loss(&mut s)
    };
    // one Richardson step over central differences at eps and eps/2
    let diff = |j: usize, eps: f64| {
        let (up, ku) = eval(j, eps);
        let (down, kd) = eval(j, -eps);
        ((up - down) / (2.0 * eps), ku == base && kd == base)
    };
    (0..len)
        .map(|j| {
            let mut eps = EPSILON;
            loop {
                let (coarse, a) = diff(j, eps);
                let (fine, b) = diff(j, eps / 2.0);
                if (a && b) || eps <= MIN_EPSILON {
                    return (4.0 * fine - coarse) / 3.0;
                }
                eps /= 10.0;
            }
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape4) -> Tensor4<f64> {
    Tensor4::from_vec(shape, uniform(rng, shape.len())).expect("length matches shape")
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, shape: Shape4) -> Batch<f64> {
    Batch::from_vec(n, shape, uniform(rng, n * shape.len())).expect("length matches shape")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Anything with trainable parameters in a fixed order.
trait Trainable: Clone {
    fn params(&mut self) -> Vec<&mut Param<f64>>;
}

macro_rules! trainable_via_tensors {
    ($($ty:ty),*) => {$(
        impl Trainable for $ty {
            fn params(&mut self) -> Vec<&mut Param<f64>> {
                let mut out = Vec::new();
                Tensors::params_mut(self, &mut out);
                out
            }
        }
    )*};
}
trainable_via_tensors!(BatchNorm<f64>, Inception<f64>, Head<f64>);

impl Trainable for Network<f64> {
    fn params(&mut self) -> Vec<&mut Param<f64>> {
        self.params_mut()
    }
}

/// Replaces the small default initialization so that every entry carries
/// gradient of comparable size.
fn randomize(layer: &mut impl Trainable, rng: &mut ChaCha8Rng) {
    for p in layer.params() {
        for v in &mut p.value {
            *v = rng.random_range(-1.0..1.0);
        }
        p.zero_grad();
    }
}

/// Compares every parameter gradient of `state` (already accumulated by one
/// backward pass) with central differences of `loss`.
fn check_params<S: Trainable>(name: &str, state: &mut S, loss: impl Fn(&mut S) -> Probe) -> Vec<GradCheck> {
    let analytic: Vec<Vec<f64>> = state.params().into_iter().map(|p| p.grad.clone()).collect();
    let frozen = state.clone();
    let numerics: Vec<Vec<f64>> = analytic
        .iter()
        .enumerate()
        .map(|(t, a)| numeric(&frozen, a.len(), |s, j, d| s.params()[t].value[j] += d, &loss))
        .collect();
    let scale = analytic.iter().chain(&numerics).map(|v| max_abs(v)).fold(0.0, f64::max);
    analytic
        .iter()
        .zip(&numerics)
        .enumerate()
        .map(|(t, (a, n))| compare_at_scale(format!("{name} param {t}"), a, n, scale))
        .collect()
}

fn check_conv_case(name: &str, rng: &mut ChaCha8Rng, x_shape: Shape4, spec: ConvSpec) -> Result<Vec<GradCheck>, TrainError> {
    let x = random_tensor(rng, x_shape);
    let weights = ConvWeights {
        weight: uniform(rng, spec.weight_len()),
        bias: uniform(rng, spec.out_channels),
    };
    let out_shape = spec.output_shape(x_shape)?;
    let r = uniform(rng, out_shape.len());
    let upstream = Tensor4::from_vec(out_shape, r.clone())?;
    let grads = conv3d_grad(&x, &weights, &upstream, &spec)?;
    let loss = |s: &mut (Tensor4<f64>, ConvWeights<f64>)| {
        smooth(dot(conv3d(&s.0, &s.1, &spec).expect("valid conv").data(), &r))
    };
    let state = (x, weights);
    let dx = numeric(&state, x_shape.len(), |s, j, d| s.0.data_mut()[j] += d, loss);
    let dw = numeric(&state, spec.weight_len(), |s, j, d| s.1.weight[j] += d, loss);
    let db = numeric(&state, spec.out_channels, |s, j, d| s.1.bias[j] += d, loss);
    Ok(vec![
        compare(format!("{name} input"), grads.input.data(), &dx),
        compare(format!("{name} weight"), &grads.weight, &dw),
        compare(format!("{name} bias"), &grads.bias, &db),
    ])
}

/// 3D convolution: stride-1 same, strided same, and valid padding.
pub fn check_conv(seed: u64) -> Result<Vec<GradCheck>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = check_conv_case("conv same", &mut rng, Shape4::new(2, 4, 5, 5), ConvSpec::cube(3, 2, 3))?;
    out.extend(check_conv_case(
        "conv strided",
        &mut rng,
        Shape4::new(2, 5, 6, 5),
        ConvSpec::new([3, 3, 3], [2, 2, 2], Padding::Same, 2, 2),
    )?);
    out.extend(check_conv_case(
        "conv valid",
        &mut rng,
        Shape4::new(2, 4, 5, 5),
        ConvSpec::new([3, 2, 3], [1, 2, 1], Padding::Valid, 2, 3),
    )?);
    Ok(out)
}

/// Training-mode batch normalization.
pub fn check_batch_norm(seed: u64) -> Result<Vec<GradCheck>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape4::new(3, 2, 3, 3);
    let x = random_batch(&mut rng, 2, shape);
    let mut bn = BatchNorm::<f64>::new(3);
    randomize(&mut bn, &mut rng);
    let r = uniform(&mut rng, x.data().len());
    bn.forward(&x, BnMode::Training)?;
    let upstream = Batch::from_vec(2, shape, r.clone())?;
    let dx = bn.backward(&upstream)?;
    let loss_x = |s: &mut (BatchNorm<f64>, Batch<f64>)| {
        let y = s.0.forward(&s.1, BnMode::Training).expect("valid batch norm");
        smooth(dot(y.data(), &r))
    };
    let state = (bn.clone(), x.clone());
    let num_dx = numeric(&state, x.data().len(), |s, j, d| s.1.data_mut()[j] += d, loss_x);
    let mut out = vec![compare("batch norm input", dx.data(), &num_dx)];
    out.extend(check_params("batch norm", &mut bn, |s| {
        smooth(dot(s.forward(&x, BnMode::Training).expect("valid batch norm").data(), &r))
    }));
    Ok(out)
}

/// Max-pool routing (non-overlapping and overlapping windows) and average pooling.
pub fn check_pooling(seed: u64) -> Result<Vec<GradCheck>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape4::new(2, 4, 4, 4);
    let mut out = Vec::new();
    for (name, window, stride) in [("max pool 2/2", [2, 2, 2], [2, 2, 2]), ("max pool 3/1", [3, 3, 3], [1, 1, 1])] {
        let x = random_tensor(&mut rng, shape);
        let (y, idx) = maxpool3d(&x, window, stride)?;
        let r = uniform(&mut rng, y.shape().len());
        let dx = maxpool3d_grad(shape, &Tensor4::from_vec(y.shape(), r.clone())?, &idx)?;
        let num = numeric(&x, shape.len(), |s, j, d| s.data_mut()[j] += d, |s| {
            let (y, idx) = maxpool3d(s, window, stride).expect("valid pool");
            (dot(y.data(), &r), idx.0)
        });
        out.push(compare(name, dx.data(), &num));
    }
    let x = random_tensor(&mut rng, shape);
    let (window, stride) = ([2, 3, 2], [1, 1, 2]);
    let y = avgpool3d(&x, window, stride)?;
    let r = uniform(&mut rng, y.shape().len());
    let dx = avgpool3d_grad(shape, &Tensor4::from_vec(y.shape(), r.clone())?, window, stride)?;
    let num = numeric(&x, shape.len(), |s, j, d| s.data_mut()[j] += d, |s| {
        smooth(dot(avgpool3d(s, window, stride).expect("valid pool").data(), &r))
    });
    out.push(compare("avg pool", dx.data(), &num));
    Ok(out)
}

/// One inception module: branch convolutions with batch norm and ReLU, the
/// pooled branch, and the channel concatenation.
pub fn check_inception(seed: u64) -> Result<Vec<GradCheck>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape4::new(3, 2, 4, 4);
    let x = random_batch(&mut rng, 2, shape);
    let mut m = Inception::<f64>::new(3, InceptionParams::new(2, (2, 3), (1, 2), 2), &mut rng);
    randomize(&mut m, &mut rng);
    let y = m.train(&x)?;
    let r = uniform(&mut rng, y.data().len());
    let dx = m.backward(&Batch::from_vec(2, y.shape(), r.clone())?)?;
    let loss = |s: &mut Inception<f64>, x: &Batch<f64>| {
        let y = s.train(x).expect("valid inception");
        let mut kinks = Vec::new();
        s.kinks(&mut kinks);
        s.clear_cache();
        (dot(y.data(), &r), kinks)
    };
    let state = (m.clone(), x.clone());
    let num_dx = numeric(&state, x.data().len(), |s, j, d| s.1.data_mut()[j] += d, |s| loss(&mut s.0, &s.1));
    let mut out = vec![compare("inception input", dx.data(), &num_dx)];
    out.extend(check_params("inception", &mut m, |s| loss(s, &x)));
    Ok(out)
}

/// Average pool, a fixed dropout mask and the class-score convolution.
pub fn check_head(seed: u64) -> Result<Vec<GradCheck>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape4::new(3, 3, 2, 2);
    let x = random_batch(&mut rng, 2, shape);
    let spec = HeadSpec {
        window: [2, 2, 2],
        stride: [1, 1, 1],
    };
    let mut head = Head::<f64>::new(spec, 3, 4, 0.5, &mut rng);
    randomize(&mut head, &mut rng);
    let mask_seed = rng.random();
    let y = head.train(&x, &mut ChaCha8Rng::seed_from_u64(mask_seed))?;
    let r = uniform(&mut rng, y.data().len());
    let dx = head.backward(&Batch::from_vec(2, y.shape(), r.clone())?)?;
    let loss = |s: &mut Head<f64>, x: &Batch<f64>| {
        let y = s.train(x, &mut ChaCha8Rng::seed_from_u64(mask_seed)).expect("valid head");
        s.clear_cache();
        smooth(dot(y.data(), &r))
    };
    let state = (head.clone(), x.clone());
    let num_dx = numeric(&state, x.data().len(), |s, j, d| s.1.data_mut()[j] += d, |s| loss(&mut s.0, &s.1));
    let mut out = vec![compare("head input", dx.data(), &num_dx)];
    out.extend(check_params("head", &mut head, |s| loss(s, &x)));
    Ok(out)
}

/// Stem convolution straight into the head, on 4-frame 4x4 inputs.
pub fn stem_head_config() -> NetworkConfig {
    NetworkConfig {
        num_classes: 3,
        in_channels: 2,
        in_spatial: [4, 4],
        window: 4,
        stem: StemSpec {
            kernel: [3, 3, 3],
            stride: [2, 2, 2],
            out_channels: 3,
        },
        stages: vec![],
        head: HeadSpec {
            window: [1, 2, 2],
            stride: [1, 1, 1],
        },
        dropout_rate: 0.5,
        seed: 5,
    }
}

/// Stem, one inception module, a max pool and the head.
pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        num_classes: 3,
        in_channels: 2,
        in_spatial: [8, 8],
        window: 8,
        stem: StemSpec {
            kernel: [3, 3, 3],
            stride: [2, 2, 2],
            out_channels: 3,
        },
        stages: vec![StageSpec {
            modules: vec![InceptionParams::new(2, (2, 2), (1, 2), 2)],
            pool: Some(PoolSpec::HALVE),
        }],
        head: HeadSpec {
            window: [1, 2, 2],
            stride: [1, 1, 1],
        },
        dropout_rate: 0.5,
        seed: 6,
    }
}

/// Whole-network gradient of the mean batch cross-entropy on a 2-sample batch.
pub fn check_network(name: &str, cfg: NetworkConfig, seed: u64) -> Result<Vec<GradCheck>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::<f64>::build(cfg)?;
    randomize(&mut net, &mut rng);
    let shape = net.config().input_shape(net.config().window);
    let x = random_batch(&mut rng, 2, shape);
    let k = net.num_classes();
    let labels = [rng.random_range(0..k), rng.random_range(0..k)];
    let mask_seed: u64 = rng.random();
    let scores = net.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(mask_seed))?;
    net.backward(&batch_loss(&scores, &labels)?.dscores)?;
    Ok(check_params(name, &mut net, |s| {
        let scores = s.forward_train(&x, &mut ChaCha8Rng::seed_from_u64(mask_seed)).expect("valid network");
        let kinks = s.kink_pattern();
        s.clear_cache();
        (batch_loss(&scores, &labels).expect("labels in range").loss, kinks)
    }))
}

/// Every check above.
pub fn suite(seed: u64) -> Result<Vec<GradCheck>, TrainError> {
    let mut out = check_conv(seed)?;
    out.extend(check_batch_norm(seed + 1)?);
    out.extend(check_pooling(seed + 2)?);
    out.extend(check_inception(seed + 3)?);
    out.extend(check_head(seed + 4)?);
    out.extend(check_network("stem+head network", stem_head_config(), seed + 5)?);
    out.extend(check_network("tiny network", tiny_config(), seed + 6)?);
    Ok(out)
}
