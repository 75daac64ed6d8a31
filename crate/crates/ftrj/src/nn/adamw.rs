//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// AdamW optimizer state.
///
/// Moments are allocated lazily on the first step and must keep the same
/// parameter layout afterwards. A non-finite gradient skips the whole step
/// (state untouched) and reports it through the return value.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub weight_decay: T,
    step_count: u64,
    first_moment: Vec<Vec<T>>,
    second_moment: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    /// Defaults: lr 1e-3, betas (0.9, 0.999), eps 1e-8.
    pub fn new(learning_rate: T, weight_decay: T) -> Self {
        AdamW {
            learning_rate,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            epsilon: T::of(1e-8),
            weight_decay,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One decoupled-weight-decay update with bias correction.
    ///
    /// Returns `Ok(true)` if the step was applied, `Ok(false)` if it was
    /// skipped because a gradient was non-finite.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<bool> {
        if params.len() != grads.len() {
            return Err(Error::DimensionMismatch("params/grads tensor count mismatch".into()));
        }
        if self.first_moment.is_empty() {
            self.first_moment = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != grads.len()
            || self
                .first_moment
                .iter()
                .zip(grads.iter())
                .any(|(m, g)| m.len() != g.len())
        {
            return Err(Error::DimensionMismatch("optimizer state does not match gradients".into()));
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Ok(false);
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - self.learning_rate * (m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * p[i]);
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut opt = AdamW::new(1e-3f64, 0.0);
        let mut p = vec![1.5, -2.0, 0.25];
        let g = vec![0.0; 3];
        let applied = opt.step(&mut [p.as_mut_slice()], &[g.as_slice()]).unwrap();
        assert!(applied);
        assert_eq!(p, vec![1.5, -2.0, 0.25]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // p = 1, g = 1, lr = 1e-3, wd = 0.1:
        //   m = 0.1, v = 0.001, m̂ = 1, v̂ = 1
        //   p' = 1 − lr·(1/(1 + 1e-8) + 0.1·1)
        let mut opt = AdamW::new(1e-3f64, 0.1);
        let mut p = vec![1.0];
        let g = vec![1.0];
        opt.step(&mut [p.as_mut_slice()], &[g.as_slice()]).unwrap();
        let expect = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8) + 0.1);
        assert!((p[0] - expect).abs() < 1e-15, "{} vs {}", p[0], expect);
    }

    #[test]
    fn identical_tensors_receive_identical_updates() {
        let mut opt = AdamW::new(1e-3f64, 0.01);
        let mut a = vec![0.3, -0.7];
        let mut b = vec![0.3, -0.7];
        let g = vec![0.5, -0.25];
        for _ in 0..5 {
            opt.step(&mut [a.as_mut_slice(), b.as_mut_slice()], &[g.as_slice(), g.as_slice()])
                .unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut opt = AdamW::new(1e-3f64, 0.0);
        let mut p = vec![1.0];
        let g = vec![f64::NAN];
        let applied = opt.step(&mut [p.as_mut_slice()], &[g.as_slice()]).unwrap();
        assert!(!applied);
        assert_eq!(p, vec![1.0]);
        assert_eq!(opt.step_count(), 0);
    }
}
