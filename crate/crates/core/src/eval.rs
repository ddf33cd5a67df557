//! Full-clip evaluation reports and forward-pass timing.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::net::{NetError, Network};
use crate::pipeline::VideoSample;
use crate::tensor::{Batch, Tensor4};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("nothing to evaluate")]
    Empty,
    #[error("sample labeled {label} but the network has {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Accuracy and confusion matrix over full-length clips.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub samples: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// `None` for classes without samples.
    pub per_class: Vec<Option<f64>>,
}

impl EvalReport {
    pub fn from_confusion(class_names: Vec<String>, confusion: Vec<Vec<usize>>) -> Result<Self, EvalError> {
        let k = confusion.len();
        if class_names.len() != k || confusion.iter().any(|r| r.len() != k) {
            return Err(EvalError::Invalid(format!(
                "{} class names for a {k}-row confusion matrix",
                class_names.len()
            )));
        }
        let samples: usize = confusion.iter().flatten().sum();
        if samples == 0 {
            return Err(EvalError::Empty);
        }
        let correct = (0..k).map(|i| confusion[i][i]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect();
        Ok(EvalReport {
            class_names,
            confusion,
            samples,
            correct,
            accuracy: correct as f64 / samples as f64,
            per_class,
        })
    }

    /// Line-delimited JSON: one summary record, one per class, one per
    /// confusion-matrix row.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        let summary = serde_json::json!({
            "record": "summary",
            "samples": self.samples,
            "correct": self.correct,
            "accuracy": self.accuracy,
        });
        let _ = writeln!(out, "{summary}");
        for (i, name) in self.class_names.iter().enumerate() {
            let rec = serde_json::json!({
                "record": "class",
                "class": i,
                "name": name,
                "samples": self.confusion[i].iter().sum::<usize>(),
                "accuracy": self.per_class[i],
            });
            let _ = writeln!(out, "{rec}");
        }
        for (i, row) in self.confusion.iter().enumerate() {
            let rec = serde_json::json!({ "record": "confusion", "truth": i, "predicted": row });
            let _ = writeln!(out, "{rec}");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "accuracy {:.2}% ({}/{})\n",
            100.0 * self.accuracy,
            self.correct,
            self.samples
        );
        let width = self.class_names.iter().map(String::len).max().unwrap_or(0).max(5);
        let _ = write!(out, "{:width$}  {:>7} ", "class", "acc");
        for i in 0..self.class_names.len() {
            let _ = write!(out, " {i:>4}");
        }
        out.push('\n');
        for (i, name) in self.class_names.iter().enumerate() {
            let acc = self.per_class[i].map_or("-".to_string(), |a| format!("{:.1}%", 100.0 * a));
            let _ = write!(out, "{name:width$}  {acc:>7} ");
            for n in &self.confusion[i] {
                let _ = write!(out, " {n:>4}");
            }
            out.push('\n');
        }
        out
    }
}

/// Classifies each full-length clip and tallies the confusion matrix.
pub fn evaluate(net: &Network<f32>, samples: &[VideoSample], class_names: &[String]) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let k = net.num_classes();
    let names: Vec<String> = if class_names.len() == k {
        class_names.to_vec()
    } else {
        (0..k).map(|i| format!("class{i}")).collect()
    };
    let mut confusion = vec![vec![0; k]; k];
    for s in samples {
        let label = s.action as usize;
        if label >= k {
            return Err(EvalError::Label { label, classes: k });
        }
        let p = net.predict_video(&s.clip)?;
        confusion[label][p.label] += 1;
    }
    EvalReport::from_confusion(names, confusion)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub trials: usize,
    /// Untimed passes before the first trial.
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { trials: 1000, warmup: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub trials: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub std_ms: f64,
    pub trial_ms: Vec<f64>,
}

impl BenchReport {
    pub fn from_trials(warmup: usize, trial_ms: Vec<f64>) -> Self {
        let n = trial_ms.len() as f64;
        let mean_ms = trial_ms.iter().sum::<f64>() / n;
        let std_ms = if trial_ms.len() > 1 {
            (trial_ms.iter().map(|t| (t - mean_ms).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        BenchReport {
            trials: trial_ms.len(),
            warmup,
            mean_ms,
            std_ms,
            trial_ms,
        }
    }
}

/// Times inference-mode forward passes of one clip. Only the forward pass is
/// inside the timer; the input batch is built once beforehand.
pub fn bench_forward(net: &Network<f32>, clip: &Tensor4<f32>, cfg: BenchConfig) -> Result<BenchReport, EvalError> {
    if cfg.trials == 0 {
        return Err(EvalError::Invalid("at least one trial is required".into()));
    }
    let batch = Batch::single(clip.clone());
    for _ in 0..cfg.warmup {
        std::hint::black_box(net.infer(&batch)?);
    }
    let mut trial_ms = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        let start = Instant::now();
        std::hint::black_box(net.infer(std::hint::black_box(&batch))?);
        trial_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(BenchReport::from_trials(cfg.warmup, trial_ms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkConfig;
    use crate::synth::{generate_dataset, SynthConfig};

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn accuracy_is_trace_over_total() {
        let r = EvalReport::from_confusion(names(3), vec![vec![5, 1, 0], vec![2, 2, 0], vec![0, 0, 0]]).unwrap();
        assert_eq!((r.samples, r.correct), (10, 7));
        assert_eq!(r.accuracy, 0.7);
        assert_eq!(r.per_class, vec![Some(5.0 / 6.0), Some(0.5), None]);
        let text = r.to_lines();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 3 + 3);
        let summary: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(summary["accuracy"], 0.7);
        assert!(r.to_text().starts_with("accuracy 70.00% (7/10)"));
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(matches!(
            EvalReport::from_confusion(names(2), vec![vec![0, 0], vec![0, 0]]),
            Err(EvalError::Empty)
        ));
        let net = Network::<f32>::build(NetworkConfig::shallow(5)).unwrap();
        assert!(matches!(evaluate(&net, &[], &[]), Err(EvalError::Empty)));
    }

    #[test]
    fn confusion_rows_count_each_class() {
        let data = generate_dataset(&SynthConfig {
            subjects: 1,
            repetitions: 2,
            frames: 20..=24,
            ..SynthConfig::default()
        })
        .unwrap();
        let net = Network::<f32>::build(NetworkConfig::compact(5)).unwrap();
        let r = evaluate(&net, &data, &names(5)).unwrap();
        assert_eq!(r.samples, 10);
        for row in &r.confusion {
            assert_eq!(row.iter().sum::<usize>(), 2);
        }
        let trace: usize = (0..5).map(|i| r.confusion[i][i]).sum();
        assert_eq!(r.accuracy, trace as f64 / 10.0);
    }

    #[test]
    fn bench_runs_exactly_the_requested_trials() {
        let cfg = NetworkConfig::compact(5);
        let net = Network::<f32>::build(cfg.clone()).unwrap();
        let clip = Tensor4::zeros(cfg.input_shape(32));
        let r = bench_forward(&net, &clip, BenchConfig { trials: 3, warmup: 1 }).unwrap();
        assert_eq!((r.trials, r.warmup, r.trial_ms.len()), (3, 1, 3));
        assert!(r.mean_ms > 0.0 && r.std_ms >= 0.0);
    }
}
