//! Sinusoidal time embedding on a fixed geometric frequency ladder.

use ndarray::{Array1, Array2, Axis};

use crate::scalar::Real;

/// Sinusoidal embedding of a scalar time: 32 frequencies, 64 output channels
/// (a sine and a cosine per frequency, sines first).
///
/// The ladder is `ω_k = 2π·2^(k/4)` for `k = 0..31`; only the count is fixed
/// externally. The embedding is smooth in `t` and its norm is `√32`.
#[derive(Debug, Clone)]
pub struct TimeEmbedding<T> {
    frequencies: Vec<T>,
}

pub(crate) const NUM_FREQUENCIES: usize = 32;

impl<T: Real> Default for TimeEmbedding<T> {
    fn default() -> Self {
        let frequencies = (0..NUM_FREQUENCIES)
            .map(|k| T::of(2.0 * std::f64::consts::PI * 2f64.powf(k as f64 / 4.0)))
            .collect();
        TimeEmbedding { frequencies }
    }
}

impl<T: Real> TimeEmbedding<T> {
    pub fn dim(&self) -> usize {
        2 * self.frequencies.len()
    }

    pub fn embed(&self, t: T) -> Array1<T> {
        let n = self.frequencies.len();
        let mut out = Array1::zeros(2 * n);
        for (k, &w) in self.frequencies.iter().enumerate() {
            out[k] = (w * t).sin();
            out[n + k] = (w * t).cos();
        }
        out
    }

    /// Exact derivative of the embedding with respect to `t`.
    pub fn embed_deriv(&self, t: T) -> Array1<T> {
        let n = self.frequencies.len();
        let mut out = Array1::zeros(2 * n);
        for (k, &w) in self.frequencies.iter().enumerate() {
            out[k] = w * (w * t).cos();
            out[n + k] = -w * (w * t).sin();
        }
        out
    }

    pub fn embed_batch(&self, ts: &Array1<T>) -> Array2<T> {
        let mut out = Array2::zeros((ts.len(), self.dim()));
        for (i, &t) in ts.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&self.embed(t));
        }
        out
    }

    pub fn embed_deriv_batch(&self, ts: &Array1<T>) -> Array2<T> {
        let mut out = Array2::zeros((ts.len(), self.dim()));
        for (i, &t) in ts.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&self.embed_deriv(t));
        }
        out
    }
}
