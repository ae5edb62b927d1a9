//! AdamW and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 }
    }
}

/// Decoupled weight decay Adam. One moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, shapes: &[usize]) -> Self {
        Self {
            cfg,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. `decay[i]` selects weight decay for parameter `i`.
    pub fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>], decay: &[bool], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), params.len());
        self.steps += 1;
        let b1 = T::lit(self.cfg.beta1);
        let b2 = T::lit(self.cfg.beta2);
        let c1 = T::lit(1.0 - self.cfg.beta1.powi(self.steps as i32));
        let c2 = T::lit(1.0 - self.cfg.beta2.powi(self.steps as i32));
        let eps = T::lit(self.cfg.eps);
        let lr_t = T::lit(lr);
        let wd = T::lit(lr * self.cfg.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                if decay[i] {
                    *w -= wd * *w;
                }
                *w -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}
