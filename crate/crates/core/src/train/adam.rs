use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::net::Param;
use crate::tensor::Scalar;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

/// Adam with bias correction and a constant learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T = f32> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of updates applied so far.
    pub step: u64,
    /// First moments, one buffer per parameter tensor.
    pub m: Vec<Vec<T>>,
    /// Second moments.
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments for parameter tensors of the given lengths.
    pub fn new(lengths: &[usize], learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: lengths.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: lengths.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_params(params: &[&mut Param<T>], learning_rate: f64) -> Self {
        let lengths: Vec<usize> = params.iter().map(|p| p.value.len()).collect();
        Self::new(&lengths, learning_rate)
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }

    /// Applies one update from the accumulated gradients.
    pub fn update(&mut self, params: &mut [&mut Param<T>]) -> Result<(), TrainError> {
        if params.len() != self.m.len()
            || params
                .iter()
                .zip(&self.m)
                .any(|(p, m)| p.value.len() != m.len() || p.grad.len() != m.len())
        {
            let have: Vec<usize> = params.iter().map(|p| p.value.len()).collect();
            return Err(TrainError::Shape(format!(
                "optimizer tracks tensors of lengths {:?}, parameters have {have:?}",
                self.lengths()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let c1 = T::one() - b1;
        let c2 = T::one() - b2;
        let lr = T::from_f64(self.learning_rate);
        let eps = T::from_f64(self.epsilon);
        let bc1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(t));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(values: &[f64], grads: &[f64]) -> Param<f64> {
        Param {
            value: values.to_vec(),
            grad: grads.to_vec(),
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = params(&[0.5, -1.25, 3.0], &[0.0; 3]);
        let mut adam = AdamState::new(&[3], DEFAULT_LEARNING_RATE);
        for _ in 0..5 {
            adam.update(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value, [0.5, -1.25, 3.0]);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        let grads = [2.5, -0.03, 1e-3];
        let mut p = params(&[0.0; 3], &grads);
        let mut adam = AdamState::new(&[3], DEFAULT_LEARNING_RATE);
        adam.update(&mut [&mut p]).unwrap();
        for (w, g) in p.value.iter().zip(grads) {
            // m_hat = g, v_hat = g^2 after bias correction
            let expect = -1e-3 * g / (g.abs() + 1e-8);
            assert!((w - expect).abs() < 1e-15, "{w} vs {expect}");
            assert!((w + 1e-3 * g.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn identical_gradient_streams_are_bit_identical() {
        let run = || {
            let mut p = params(&[0.1, 0.2], &[0.0, 0.0]);
            let mut adam = AdamState::new(&[2], DEFAULT_LEARNING_RATE);
            for i in 0..50 {
                p.grad = vec![(i as f64 * 0.7).sin(), (i as f64 * 0.3).cos()];
                adam.update(&mut [&mut p]).unwrap();
            }
            p.value
        };
        let (a, b) = (run(), run());
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = params(&[0.0; 2], &[0.0; 2]);
        let mut adam = AdamState::<f64>::new(&[3], DEFAULT_LEARNING_RATE);
        assert!(matches!(adam.update(&mut [&mut p]), Err(TrainError::Shape(_))));
        assert_eq!(adam.step, 0);
    }
}
