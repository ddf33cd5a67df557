//! Loss, optimizer and the training loop.

mod adam;
pub mod gradcheck;
mod loss;

pub use adam::{AdamState, DEFAULT_LEARNING_RATE};
pub use loss::{batch_loss, cross_entropy, BatchLoss};

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::net::{NetError, Network};
use crate::pipeline::{
    window_indices, window_start, ActivationSource, AugmentConfig, AugmentDraw, PipelineError, VideoSample, WindowSpec,
    WindowStart,
};
use crate::synth::KeypointTaxonomy;
use crate::tensor::{Batch, Scalar, Shape4, Tensor4, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Frames per training window; must match the network's window.
    pub window: usize,
    pub learning_rate: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Training batches whose statistics replace the batch-norm running
    /// averages once the last step is taken. Zero keeps the momentum averages.
    #[serde(default = "default_bn_batches")]
    pub bn_recalibration_batches: usize,
}

pub const DEFAULT_BN_RECALIBRATION_BATCHES: usize = 20;

fn default_bn_batches() -> usize {
    DEFAULT_BN_RECALIBRATION_BATCHES
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            batch_size: 32,
            window: 32,
            learning_rate: DEFAULT_LEARNING_RATE,
            augment: AugmentConfig::default(),
            seed: 0,
            bn_recalibration_batches: DEFAULT_BN_RECALIBRATION_BATCHES,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.window == 0 {
            return Err(TrainError::Config("batch size and window must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {}", self.learning_rate)));
        }
        self.augment.validate()?;
        Ok(())
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    /// 1-based.
    pub iteration: usize,
    pub loss: f64,
    /// Fraction of the batch classified correctly before the update.
    pub accuracy: f64,
    pub wall_ms: f64,
}

impl HistoryRecord {
    /// One JSON object, without a trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<HistoryRecord>,
    pub optimizer: AdamState<f32>,
}

/// Stacks equal-shape windows along a leading sample axis.
pub fn stack_windows<T: Scalar>(windows: &[Tensor4<T>]) -> Result<Batch<T>, TrainError> {
    Ok(Batch::stack(windows)?)
}

/// Inverse of [`stack_windows`].
pub fn unstack_windows<T: Scalar>(batch: &Batch<T>) -> Vec<Tensor4<T>> {
    batch.unstack()
}

/// Draws one augmented batch: a sample index, a looped window at a random
/// start and one augmentation per window, in that order.
pub fn draw_batch(
    data: &[VideoSample],
    cfg: &TrainConfig,
    taxonomy: &KeypointTaxonomy,
    rng: &mut ChaCha8Rng,
) -> Result<(Batch<f32>, Vec<usize>), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let spec = WindowSpec {
        length: cfg.window,
        start: WindowStart::Random,
    };
    let first = data[0].clip.shape();
    let shape = Shape4::new(first.c, cfg.window, first.h, first.w);
    let mut batch = Batch::zeros(cfg.batch_size, shape);
    let mut labels = Vec::with_capacity(cfg.batch_size);
    for i in 0..cfg.batch_size {
        let s = &data[rng.random_range(0..data.len())];
        let clip = s.clip.shape();
        if (clip.c, clip.h, clip.w) != (shape.c, shape.h, shape.w) {
            return Err(TrainError::Shape(format!("clip {clip} in a dataset of {first} clips")));
        }
        let frames = window_indices(clip.t, window_start(clip.t, &spec, rng), cfg.window);
        let draw = AugmentDraw::sample(&cfg.augment, ActivationSource::Pregenerated, rng)?;
        draw.apply_window_into(&s.clip, &frames, taxonomy, batch.sample_mut(i))?;
        labels.push(s.action as usize);
    }
    Ok((batch, labels))
}

/// Runs `cfg.iterations` Adam steps on windows drawn from `data`, calling
/// `observe` after each. Deterministic given `cfg.seed` and the network.
pub fn train(
    net: &mut Network<f32>,
    data: &[VideoSample],
    cfg: &TrainConfig,
    mut observe: impl FnMut(&HistoryRecord),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.window != net.config().window {
        return Err(TrainError::Config(format!(
            "training window {} differs from the network window {}",
            cfg.window,
            net.config().window
        )));
    }
    let classes = net.num_classes();
    if let Some(s) = data.iter().find(|s| s.action as usize >= classes) {
        return Err(TrainError::Label {
            label: s.action as usize,
            classes,
        });
    }
    let taxonomy = KeypointTaxonomy::coco17();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = AdamState::for_params(&net.params_mut(), cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.iterations);
    for iteration in 1..=cfg.iterations {
        let start = Instant::now();
        let (batch, labels) = draw_batch(data, cfg, &taxonomy, &mut rng)?;
        let scores = net.forward_train(&batch, &mut rng)?;
        let out = batch_loss(&scores, &labels)?;
        net.zero_grad();
        net.backward(&out.dscores)?;
        optimizer.update(&mut net.params_mut())?;
        let record = HistoryRecord {
            iteration,
            loss: out.loss as f64,
            accuracy: out.correct as f64 / labels.len() as f64,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        observe(&record);
        history.push(record);
    }
    if cfg.iterations > 0 {
        let batches = (0..cfg.bn_recalibration_batches)
            .map(|_| draw_batch(data, cfg, &taxonomy, &mut rng).map(|(b, _)| b));
        net.recalibrate_batch_norm::<TrainError>(batches)?;
    }
    Ok(TrainReport { history, optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{HeadSpec, InceptionParams, NetworkConfig, PoolSpec, StageSpec, StemSpec};
    use crate::synth::{generate_dataset, SynthConfig};

    pub(crate) fn small_net_config() -> NetworkConfig {
        NetworkConfig {
            num_classes: 5,
            in_channels: 17,
            in_spatial: [64, 48],
            window: 8,
            stem: StemSpec {
                kernel: [3, 3, 3],
                stride: [2, 4, 4],
                out_channels: 4,
            },
            stages: vec![StageSpec {
                modules: vec![InceptionParams::new(2, (2, 2), (1, 2), 2)],
                pool: Some(PoolSpec::HALVE),
            }],
            head: HeadSpec {
                window: [1, 8, 6],
                stride: [1, 1, 1],
            },
            dropout_rate: 0.5,
            seed: 1,
        }
    }

    fn small_data() -> Vec<VideoSample> {
        generate_dataset(&SynthConfig {
            subjects: 1,
            repetitions: 1,
            frames: 5..=12,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn small_train() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            batch_size: 2,
            window: 8,
            ..TrainConfig::default()
        }
    }

    fn snapshot(net: &Network<f32>) -> Vec<Vec<u32>> {
        net.named_tensors()
            .into_iter()
            .map(|(_, v)| v.iter().map(|x| x.to_bits()).collect())
            .collect()
    }

    #[test]
    fn recalibration_touches_only_running_statistics() {
        let data = small_data();
        let run = |k| {
            let mut net = Network::build(small_net_config()).unwrap();
            let cfg = TrainConfig {
                bn_recalibration_batches: k,
                ..small_train()
            };
            train(&mut net, &data, &cfg, |_| {}).unwrap();
            net.named_tensors()
                .into_iter()
                .map(|(n, v)| (n, v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()))
                .collect::<Vec<_>>()
        };
        let (plain, recal) = (run(0), run(2));
        assert_eq!(recal, run(2));
        for ((name, a), (_, b)) in plain.iter().zip(&recal) {
            if name.contains("running_") {
                assert_ne!(a, b, "{name}");
            } else {
                assert_eq!(a, b, "{name}");
            }
        }
    }

    #[test]
    fn zero_iterations_leave_network_unchanged() {
        let mut net = Network::build(small_net_config()).unwrap();
        let before = snapshot(&net);
        let cfg = TrainConfig {
            iterations: 0,
            ..small_train()
        };
        let report = train(&mut net, &small_data(), &cfg, |_| {}).unwrap();
        assert!(report.history.is_empty());
        assert_eq!(snapshot(&net), before);
    }

    #[test]
    fn same_seed_same_history() {
        let data = small_data();
        let run = || {
            let mut net = Network::build(small_net_config()).unwrap();
            let h = train(&mut net, &data, &small_train(), |_| {}).unwrap().history;
            (h.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>(), snapshot(&net))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn observer_sees_every_record() {
        let mut net = Network::build(small_net_config()).unwrap();
        let mut seen = Vec::new();
        let report = train(&mut net, &small_data(), &small_train(), |r| seen.push(r.iteration)).unwrap();
        assert_eq!(seen, [1, 2, 3]);
        assert_eq!(report.optimizer.step, 3);
        let line = report.history[0].to_line();
        assert!(line.starts_with("{\"iteration\":1,\"loss\":"), "{line}");
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut net = Network::build(small_net_config()).unwrap();
        assert!(matches!(
            train(&mut net, &[], &small_train(), |_| {}),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn window_mismatch_rejected() {
        let mut net = Network::build(small_net_config()).unwrap();
        let cfg = TrainConfig {
            window: 32,
            ..small_train()
        };
        assert!(matches!(train(&mut net, &small_data(), &cfg, |_| {}), Err(TrainError::Config(_))));
    }

    #[test]
    fn stack_and_unstack_are_inverse() {
        let a = Tensor4::from_fn(Shape4::new(17, 32, 4, 3), |c, t, h, w| (c * 7 + t * 3 + h + w) as f32 * 0.25);
        let b = a.map(|v| -v);
        let batch = stack_windows(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(batch.dims(), [2, 17, 32, 4, 3]);
        assert_eq!(unstack_windows(&batch), vec![a, b]);
    }

    #[test]
    fn heterogeneous_windows_rejected() {
        let a = Tensor4::<f32>::zeros(Shape4::new(2, 4, 3, 3));
        let b = Tensor4::<f32>::zeros(Shape4::new(2, 4, 3, 2));
        assert!(stack_windows(&[a, b]).is_err());
    }

    #[test]
    fn single_window_batch_matches_unbatched_forward() {
        let mut net = Network::<f32>::build(small_net_config()).unwrap();
        let clip = loop_window(&small_data()[0].clip);
        let single = net.forward_window(&clip, crate::net::Mode::Inference).unwrap();
        let batched = net.infer(&stack_windows(&[clip]).unwrap()).unwrap();
        for (a, b) in single.scores.data().iter().zip(batched.sample(0)) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    fn loop_window(clip: &Tensor4<f32>) -> Tensor4<f32> {
        crate::pipeline::loop_clip(clip, 0, 8)
    }

    #[test]
    fn doubling_the_loss_doubles_every_gradient() {
        let data = small_data();
        let grads = |scale: f32| {
            let mut net = Network::<f32>::build(small_net_config()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let (batch, labels) = draw_batch(&data, &small_train(), &KeypointTaxonomy::coco17(), &mut rng).unwrap();
            let scores = net.forward_train(&batch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let mut d = batch_loss(&scores, &labels).unwrap().dscores;
            d.data_mut().iter_mut().for_each(|v| *v *= scale);
            net.backward(&d).unwrap();
            net.params_mut().into_iter().flat_map(|p| p.grad.clone()).collect::<Vec<f32>>()
        };
        let (g1, g2) = (grads(1.0), grads(2.0));
        let norm = g1.iter().map(|v| v.abs()).fold(0.0, f32::max);
        assert!(norm > 0.0);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((b - 2.0 * a).abs() <= 1e-6 * (2.0 * a.abs()).max(norm * 1e-3), "{a} {b}");
        }
    }

    #[test]
    fn confident_correct_predictions_give_vanishing_gradients() {
        let data = small_data();
        let mut net = Network::<f32>::build(small_net_config()).unwrap();
        let label = data[0].action as usize;
        for (name, v) in net.named_tensors_mut() {
            if name == "head.logits.bias" {
                v[label] = 40.0;
            }
        }
        let batch = stack_windows(&[loop_window(&data[0].clip), loop_window(&data[0].clip)]).unwrap();
        let scores = net.forward_train(&batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = batch_loss(&scores, &[label, label]).unwrap();
        assert!(out.loss < 1e-6);
        net.zero_grad();
        net.backward(&out.dscores).unwrap();
        for p in net.params_mut() {
            assert!(p.grad.iter().all(|g| g.abs() <= 1e-6));
        }
    }

    #[test]
    fn drawn_batch_matches_window_then_augment() {
        use crate::pipeline::{augment, sample_window};
        let data = small_data();
        let cfg = TrainConfig {
            batch_size: 4,
            augment: AugmentConfig {
                rotation_prob: 0.7,
                ..AugmentConfig::default()
            },
            ..small_train()
        };
        let tax = KeypointTaxonomy::coco17();
        let (batch, labels) = draw_batch(&data, &cfg, &tax, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = WindowSpec {
            length: cfg.window,
            start: WindowStart::Random,
        };
        for i in 0..4 {
            let s = &data[rng.random_range(0..data.len())];
            let w = augment(&sample_window(&s.clip, &spec, &mut rng), &cfg.augment, &tax, &mut rng).unwrap();
            assert_eq!(batch.sample(i), w.data());
            assert_eq!(labels[i], s.action as usize);
        }
    }
}
