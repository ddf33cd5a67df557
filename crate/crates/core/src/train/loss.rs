use super::TrainError;
use crate::net::{argmax, softmax, temporal_mean};
use crate::tensor::{Batch, Scalar};

/// Softmax cross-entropy of one logit vector: `-log p[label]` via
/// log-sum-exp, and its gradient `p - onehot(label)` with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>), TrainError> {
    if label >= logits.len() {
        return Err(TrainError::Label {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    let mut grad = softmax(logits);
    grad[label] -= T::one();
    Ok((lse - logits[label], grad))
}

/// Loss of one batch of score blocks `(k, t', 1, 1)`.
#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    /// Mean cross-entropy over the batch.
    pub loss: T,
    /// Gradient of `loss` with respect to every score position.
    pub dscores: Batch<T>,
    /// Samples whose averaged scores put the label first.
    pub correct: usize,
}

/// Mean cross-entropy of the temporally averaged scores of each sample.
pub fn batch_loss<T: Scalar>(scores: &Batch<T>, labels: &[usize]) -> Result<BatchLoss<T>, TrainError> {
    let n = scores.len();
    if labels.len() != n {
        return Err(TrainError::Shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let s = scores.shape();
    let (k, t) = (s.c, s.len() / s.c);
    let scale = T::from_f64(1.0 / (t * n) as f64);
    let mut dscores = Batch::zeros(n, s);
    let mut total = T::zero();
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let logits = temporal_mean(scores.sample(i), k);
        let (loss, grad) = cross_entropy(&logits, label)?;
        total += loss;
        correct += usize::from(argmax(&logits) == label);
        for (row, g) in dscores.sample_mut(i).chunks_exact_mut(t).zip(grad) {
            row.fill(g * scale);
        }
    }
    Ok(BatchLoss {
        loss: total / T::from_f64(n as f64),
        dscores,
        correct,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_scores_cost_log_class_count() {
        let (loss, grad) = cross_entropy(&[0.3f64; 27], 4).unwrap();
        assert!((loss - 27f64.ln()).abs() < 1e-12);
        assert!((loss - 3.2958).abs() < 1e-4);
        assert!((grad[4] + 26.0 / 27.0).abs() < 1e-12);
    }

    #[test]
    fn certain_prediction_costs_nothing() {
        let (loss, grad) = cross_entropy(&[0.0f64, 800.0, 0.0], 1).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| g.abs() == 0.0));
    }

    #[test]
    fn label_out_of_range_rejected() {
        assert!(matches!(
            cross_entropy(&[0.0f32; 5], 5),
            Err(TrainError::Label { label: 5, classes: 5 })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-4.0..4.0)).collect();
            let label = rng.random_range(0..6);
            let (_, grad) = cross_entropy(&logits, label).unwrap();
            let eps = 1e-6;
            for j in 0..6 {
                let mut up = logits.clone();
                let mut down = logits.clone();
                up[j] += eps;
                down[j] -= eps;
                let num = (cross_entropy(&up, label).unwrap().0 - cross_entropy(&down, label).unwrap().0) / (2.0 * eps);
                assert!((num - grad[j]).abs() < 1e-6, "{num} vs {}", grad[j]);
            }
        }
    }

    #[test]
    fn batch_gradient_spreads_over_positions() {
        // 2 samples, 3 classes, 2 positions
        let s = Shape4::new(3, 2, 1, 1);
        let data = vec![1.0, 3.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let scores = Batch::from_vec(2, s, data).unwrap();
        let out = batch_loss(&scores, &[0, 2]).unwrap();
        let (l0, g0) = cross_entropy(&[2.0f64, 0.0, 0.0], 0).unwrap();
        let (l1, _) = cross_entropy(&[0.0f64, 0.0, 0.0], 2).unwrap();
        assert!((out.loss - (l0 + l1) / 2.0).abs() < 1e-12);
        assert_eq!(out.correct, 1);
        assert!((out.dscores.sample(0)[0] - g0[0] / 4.0).abs() < 1e-12);
        assert_eq!(out.dscores.sample(0)[0], out.dscores.sample(0)[1]);
    }
}
