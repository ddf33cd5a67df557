use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::NetworkConfig;
use super::layers::{ConvUnit, Head, Inception, Kinks, MaxPoolLayer, Param, Tensors};
use super::NetError;
use crate::pipeline::loop_clip;
use crate::tensor::{Batch, Scalar, Tensor4};

/// Forward-pass mode. Training draws dropout masks from the supplied RNG,
/// normalizes with batch statistics and records what backward needs.
pub enum Mode<'a> {
    Inference,
    Training(&'a mut dyn RngCore),
}

#[derive(Debug, Clone)]
enum Block<T> {
    Inception(Box<Inception<T>>),
    Pool(MaxPoolLayer<T>),
}

/// Instantiated reprojection-and-prediction network.
#[derive(Debug, Clone)]
pub struct Network<T = f32> {
    config: NetworkConfig,
    stem: ConvUnit<T>,
    blocks: Vec<Block<T>>,
    head: Head<T>,
    input: Option<Batch<T>>,
}

/// Scores of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowScores<T = f32> {
    /// Per-position class scores `(num_classes, t', 1, 1)`.
    pub scores: Tensor4<T>,
    /// Softmax of the temporally averaged scores.
    pub probabilities: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T = f32> {
    pub probabilities: Vec<T>,
    pub label: usize,
    /// Number of temporal score positions that were averaged.
    pub score_frames: usize,
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean over the temporal axis of one `(k, t', 1, 1)` score block.
pub fn temporal_mean<T: Scalar>(scores: &[T], classes: usize) -> Vec<T> {
    let t = scores.len() / classes;
    let n = T::from_f64(t as f64);
    scores
        .chunks_exact(t)
        .map(|row| row.iter().copied().sum::<T>() / n)
        .collect()
}

impl<T: Scalar> Network<T> {
    /// Builds the network with zero-mean Gaussian conv weights (std 0.01),
    /// zero biases and unit batch-norm gains, deterministically from `cfg.seed`.
    pub fn build(cfg: NetworkConfig) -> Result<Self, NetError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let stem = ConvUnit::new(cfg.stem_conv(), &mut rng);
        let mut blocks = Vec::new();
        let mut c = cfg.stem.out_channels;
        for stage in &cfg.stages {
            for &m in &stage.modules {
                blocks.push(Block::Inception(Box::new(Inception::new(c, m, &mut rng))));
                c = m.out_channels();
            }
            if let Some(pool) = stage.pool {
                blocks.push(Block::Pool(MaxPoolLayer::new(pool)));
            }
        }
        let head = Head::new(cfg.head, c, cfg.num_classes, cfg.dropout_rate, &mut rng);
        Ok(Network {
            config: cfg,
            stem,
            blocks,
            head,
            input: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn check_input(&self, x: &Batch<T>) -> Result<(), NetError> {
        let s = x.shape();
        let want = self.config.input_shape(s.t);
        if s != want {
            return Err(NetError::InputShape(format!("network expects {want}, got {s}")));
        }
        Ok(())
    }

    /// Inference-mode forward pass of a batch: per-sample score blocks.
    pub fn infer(&self, x: &Batch<T>) -> Result<Batch<T>, NetError> {
        self.check_input(x)?;
        let mut h = self.stem.infer(x)?;
        for block in &self.blocks {
            h = match block {
                Block::Inception(m) => m.infer(&h)?,
                Block::Pool(p) => p.infer(&h)?,
            };
        }
        self.head.infer(&h)
    }

    /// Training-mode forward pass; records intermediates for [`backward`](Self::backward).
    pub fn forward_train(&mut self, x: &Batch<T>, rng: &mut dyn RngCore) -> Result<Batch<T>, NetError> {
        self.check_input(x)?;
        let mut h = self.stem.train(x)?;
        for block in &mut self.blocks {
            h = match block {
                Block::Inception(m) => m.train(&h)?,
                Block::Pool(p) => p.train(&h)?,
            };
        }
        let y = self.head.train(&h, rng)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    /// Backpropagates `dscores` (gradient w.r.t. the score blocks of the last
    /// training forward) and accumulates every parameter gradient.
    pub fn backward(&mut self, dscores: &Batch<T>) -> Result<(), NetError> {
        let input = self.input.take().ok_or(NetError::MissingForward("network"))?;
        let mut d = self.head.backward(dscores)?;
        for block in self.blocks.iter_mut().rev() {
            d = match block {
                Block::Inception(m) => m.backward(&d)?,
                Block::Pool(p) => p.backward(&d)?,
            };
        }
        // the input is data, so no gradient flows past the stem
        self.stem.backward(&input, d, false)?;
        Ok(())
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut super::BatchNorm<T>> {
        let mut out = vec![&mut self.stem.bn];
        for block in &mut self.blocks {
            if let Block::Inception(m) = block {
                out.extend(m.batch_norms_mut());
            }
        }
        out
    }

    /// Replaces every batch-norm running statistic with the equal-weight
    /// average of its batch statistics over `batches`, run as training
    /// forwards. Learned parameters are untouched. Returns the number of
    /// batches used; with none, the statistics are left as they were.
    pub fn recalibrate_batch_norm<E: From<NetError>>(
        &mut self,
        batches: impl IntoIterator<Item = Result<Batch<T>, E>>,
    ) -> Result<usize, E> {
        // dropout follows every batch norm, so its mask cannot affect the statistics
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut used = 0;
        let mut result = Ok(());
        for batch in batches {
            let batch = match batch {
                Ok(b) => b,
                Err(e) => {
                    result = Err(e);
                    break;
                }
            };
            if used == 0 {
                self.batch_norms_mut().into_iter().for_each(|bn| bn.begin_averaging());
            }
            used += 1;
            if let Err(e) = self.forward_train(&batch, &mut rng) {
                result = Err(e.into());
                break;
            }
        }
        self.batch_norms_mut().into_iter().for_each(|bn| bn.end_averaging());
        self.clear_cache();
        result.map(|()| used)
    }

    /// Kink pattern of the last training forward.
    pub(crate) fn kink_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        self.stem.kinks(&mut out);
        for block in &self.blocks {
            match block {
                Block::Inception(m) => m.kinks(&mut out),
                Block::Pool(p) => p.kinks(&mut out),
            }
        }
        out
    }

    /// Drops any recorded forward state.
    pub fn clear_cache(&mut self) {
        self.input = None;
        self.stem.bn.clear_cache();
        for block in &mut self.blocks {
            match block {
                Block::Inception(m) => m.clear_cache(),
                Block::Pool(p) => p.clear_cache(),
            }
        }
        self.head.clear_cache();
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Trainable parameters in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        self.stem.params_mut(&mut out);
        for block in &mut self.blocks {
            if let Block::Inception(m) = block {
                m.params_mut(&mut out);
            }
        }
        self.head.params_mut(&mut out);
        out
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.named_tensors()
            .iter()
            .filter(|(name, _)| !name.ends_with("running_mean") && !name.ends_with("running_var"))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Every stored tensor (parameters and running statistics) by name.
    pub fn named_tensors(&self) -> Vec<(String, &Vec<T>)> {
        let mut out = Vec::new();
        self.stem.tensors("stem", &mut out);
        let mut idx = 0;
        for block in &self.blocks {
            if let Block::Inception(m) = block {
                m.tensors(&format!("inception{idx}"), &mut out);
                idx += 1;
            }
        }
        self.head.tensors("head", &mut out);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        self.stem.tensors_mut("stem", &mut out);
        let mut idx = 0;
        for block in &mut self.blocks {
            if let Block::Inception(m) = block {
                m.tensors_mut(&format!("inception{idx}"), &mut out);
                idx += 1;
            }
        }
        self.head.tensors_mut("head", &mut out);
        out
    }

    /// Scores one window of exactly `config.window` frames.
    pub fn forward_window(&mut self, clip: &Tensor4<T>, mode: Mode<'_>) -> Result<WindowScores<T>, NetError> {
        if clip.shape().t != self.config.window {
            return Err(NetError::WindowLength {
                expected: self.config.window,
                got: clip.shape().t,
            });
        }
        let batch = Batch::single(clip.clone());
        let scores = match mode {
            Mode::Inference => self.infer(&batch)?,
            Mode::Training(rng) => {
                let y = self.forward_train(&batch, rng)?;
                self.clear_cache();
                y
            }
        };
        let scores = scores.to_tensor(0);
        let probabilities = softmax(&temporal_mean(scores.data(), self.config.num_classes));
        Ok(WindowScores { scores, probabilities })
    }

    /// Classifies a whole clip of any length: clips shorter than the
    /// network's minimum are looped, then all temporal scores are averaged.
    pub fn predict_video(&self, clip: &Tensor4<T>) -> Result<Prediction<T>, NetError> {
        if clip.shape().t == 0 {
            return Err(NetError::InputShape("clip has no frames".into()));
        }
        let min = self.config.min_frames();
        let looped;
        let clip = if clip.shape().t < min {
            looped = loop_clip(clip, 0, min);
            &looped
        } else {
            clip
        };
        let scores = self.infer(&Batch::single(clip.clone()))?;
        let k = self.config.num_classes;
        let probabilities = softmax(&temporal_mean(scores.sample(0), k));
        Ok(Prediction {
            label: argmax(&probabilities),
            score_frames: scores.shape().t,
            probabilities,
        })
    }
}
