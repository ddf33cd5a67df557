use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::NetError;
use crate::tensor::{ConvSpec, Padding, Shape4};

/// Channel widths of one inflated inception module.
///
/// Branch 1 is a 1x1x1 conv; branches 2 and 3 are a 1x1x1 reduction followed
/// by a 3x3x3 conv; branch 4 is a 3x3x3 stride-1 max pool followed by a
/// 1x1x1 conv. Outputs are concatenated along channels in that order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InceptionParams {
    pub b1: usize,
    pub b2_reduce: usize,
    pub b2: usize,
    pub b3_reduce: usize,
    pub b3: usize,
    pub b4: usize,
}

impl InceptionParams {
    pub const fn new(b1: usize, b2: (usize, usize), b3: (usize, usize), b4: usize) -> Self {
        InceptionParams {
            b1,
            b2_reduce: b2.0,
            b2: b2.1,
            b3_reduce: b3.0,
            b3: b3.1,
            b4,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.b1 + self.b2 + self.b3 + self.b4
    }

    fn widths(&self) -> [usize; 6] {
        [self.b1, self.b2_reduce, self.b2, self.b3_reduce, self.b3, self.b4]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolSpec {
    pub window: [usize; 3],
    pub stride: [usize; 3],
}

impl PoolSpec {
    pub const HALVE: PoolSpec = PoolSpec {
        window: [2, 2, 2],
        stride: [2, 2, 2],
    };
}

/// A run of inception modules, optionally followed by a same-padded max pool.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageSpec {
    pub modules: Vec<InceptionParams>,
    pub pool: Option<PoolSpec>,
}

/// Strided same-padded entry convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StemSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub out_channels: usize,
}

/// Average-pool window of the prediction head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadSpec {
    pub window: [usize; 3],
    pub stride: [usize; 3],
}

fn default_window() -> usize {
    32
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub in_channels: usize,
    /// Input `(height, width)`.
    pub in_spatial: [usize; 2],
    /// Training window length in frames; the shape trace is validated at this length.
    #[serde(default = "default_window")]
    pub window: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
    pub dropout_rate: f64,
    pub seed: u64,
}

/// Keypoint heatmap channels produced by the pose stage.
pub const KEYPOINT_CHANNELS: usize = 17;
/// Feature-pyramid tap width used for intermediate-level inputs.
pub const PYRAMID_CHANNELS: usize = 256;

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::reference(27)
    }
}

impl NetworkConfig {
    /// Full-width architecture: stem, two inception modules, pool, two
    /// modules, pool, one module, then the head.
    pub fn reference(num_classes: usize) -> Self {
        NetworkConfig {
            num_classes,
            in_channels: KEYPOINT_CHANNELS,
            in_spatial: [64, 48],
            window: 32,
            stem: StemSpec {
                kernel: [7, 3, 3],
                stride: [2, 2, 2],
                out_channels: 64,
            },
            stages: vec![
                StageSpec {
                    modules: vec![
                        InceptionParams::new(16, (24, 32), (4, 8), 8),
                        InceptionParams::new(32, (32, 48), (8, 24), 16),
                    ],
                    pool: Some(PoolSpec::HALVE),
                },
                StageSpec {
                    modules: vec![
                        InceptionParams::new(48, (24, 52), (4, 12), 16),
                        InceptionParams::new(40, (28, 56), (6, 16), 16),
                    ],
                    pool: Some(PoolSpec::HALVE),
                },
                StageSpec {
                    modules: vec![InceptionParams::new(64, (40, 80), (8, 32), 32)],
                    pool: None,
                },
            ],
            head: HeadSpec {
                window: [2, 8, 6],
                stride: [1, 1, 1],
            },
            dropout_rate: 0.5,
            seed: 0,
        }
    }

    /// Narrow variant of [`reference`](Self::reference) that max-pools
    /// straight after the stem, sized for single-core CPU training. Shapes
    /// from stage 1 onward match the reference.
    pub fn compact(num_classes: usize) -> Self {
        NetworkConfig {
            stem: StemSpec {
                out_channels: 8,
                ..Self::reference(num_classes).stem
            },
            stages: vec![
                // pool straight after the stem, so no module runs at full resolution
                StageSpec {
                    modules: vec![],
                    pool: Some(PoolSpec::HALVE),
                },
                StageSpec {
                    modules: vec![
                        InceptionParams::new(8, (8, 12), (4, 8), 4),
                        InceptionParams::new(12, (12, 16), (4, 8), 8),
                    ],
                    pool: Some(PoolSpec::HALVE),
                },
                StageSpec {
                    modules: vec![InceptionParams::new(32, (24, 48), (8, 16), 16)],
                    pool: None,
                },
            ],
            ..Self::reference(num_classes)
        }
    }

    /// Reference topology with a single inception module per stage.
    pub fn shallow(num_classes: usize) -> Self {
        let mut cfg = Self::reference(num_classes);
        for stage in &mut cfg.stages {
            stage.modules.truncate(1);
        }
        cfg
    }

    pub fn stem_conv(&self) -> ConvSpec {
        ConvSpec::new(
            self.stem.kernel,
            self.stem.stride,
            Padding::Same,
            self.in_channels,
            self.stem.out_channels,
        )
    }

    pub fn input_shape(&self, frames: usize) -> Shape4 {
        Shape4::new(self.in_channels, frames, self.in_spatial[0], self.in_spatial[1])
    }

    /// Width of the features entering the head.
    pub fn feature_channels(&self) -> usize {
        let mut c = self.stem.out_channels;
        for stage in &self.stages {
            if let Some(m) = stage.modules.last() {
                c = m.out_channels();
            }
        }
        c
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        // conv weight + bias, batch-norm gain + offset
        let unit = |spec: ConvSpec| spec.weight_len() + 3 * spec.out_channels;
        let mut total = unit(self.stem_conv());
        let mut c = self.stem.out_channels;
        for stage in &self.stages {
            for m in &stage.modules {
                total += unit(ConvSpec::pointwise(c, m.b1))
                    + unit(ConvSpec::pointwise(c, m.b2_reduce))
                    + unit(ConvSpec::cube(3, m.b2_reduce, m.b2))
                    + unit(ConvSpec::pointwise(c, m.b3_reduce))
                    + unit(ConvSpec::cube(3, m.b3_reduce, m.b3))
                    + unit(ConvSpec::pointwise(c, m.b4));
                c = m.out_channels();
            }
        }
        let logits = ConvSpec::pointwise(c, self.num_classes);
        total + logits.weight_len() + self.num_classes
    }

    /// Layer-by-layer output shapes for a `frames`-long input.
    ///
    /// Fails naming the first layer whose output would be empty, or the head
    /// if it does not collapse space to `1 x 1`.
    pub fn trace(&self, frames: usize) -> Result<Vec<(String, Shape4)>, NetError> {
        let invalid = |layer: &str, reason: String| NetError::InvalidConfig {
            layer: layer.to_string(),
            reason,
        };
        if self.num_classes == 0 {
            return Err(invalid("head", "num_classes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(invalid("head", format!("dropout rate {} outside [0, 1]", self.dropout_rate)));
        }
        let mut trace = Vec::new();
        let input = self.input_shape(frames);
        trace.push(("input".to_string(), input));
        let mut shape = self
            .stem_conv()
            .output_shape(input)
            .map_err(|e| invalid("stem", e.to_string()))?;
        trace.push(("stem".to_string(), shape));
        for (si, stage) in self.stages.iter().enumerate() {
            for (mi, m) in stage.modules.iter().enumerate() {
                let name = format!("stage{si}.inception{mi}");
                if m.widths().contains(&0) {
                    return Err(invalid(&name, format!("zero branch width in {m:?}")));
                }
                shape = shape.with_channels(m.out_channels());
                trace.push((name, shape));
            }
            if let Some(pool) = stage.pool {
                let name = format!("stage{si}.pool");
                shape = crate::tensor::maxpool_output(shape, pool.window, pool.stride)
                    .map_err(|e| invalid(&name, e.to_string()))?;
                trace.push((name, shape));
            }
        }
        let before_head = shape;
        let pooled = crate::tensor::avgpool_output(shape, self.head.window, self.head.stride)
            .map_err(|_| {
                invalid(
                    "head",
                    format!(
                        "spatio-temporal extent after stages is ({},{},{}), smaller than head window {:?}",
                        before_head.t, before_head.h, before_head.w, self.head.window
                    ),
                )
            })?;
        if (pooled.h, pooled.w) != (1, 1) {
            return Err(invalid(
                "head",
                format!(
                    "spatial extent after stages is ({},{}) but head window {:?} needs ({},{})",
                    before_head.h, before_head.w, self.head.window, self.head.window[1], self.head.window[2]
                ),
            ));
        }
        trace.push(("head.pool".to_string(), pooled));
        trace.push(("head.logits".to_string(), pooled.with_channels(self.num_classes)));
        Ok(trace)
    }

    /// Validates the shape trace at the training window length.
    pub fn validate(&self) -> Result<(), NetError> {
        self.trace(self.window).map(|_| ())
    }

    /// Temporal extent of the score block for a `frames`-long input.
    pub fn score_frames(&self, frames: usize) -> Result<usize, NetError> {
        Ok(self.trace(frames)?.last().expect("trace is never empty").1.t)
    }

    /// Shortest clip the network accepts; shorter clips are looped up to it.
    pub fn min_frames(&self) -> usize {
        (1..=self.window.max(1))
            .find(|&t| self.trace(t).is_ok())
            .unwrap_or(self.window)
    }

    /// Canonical serialized form (JSON).
    pub fn to_canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_canonical().as_bytes()).into()
    }
}
