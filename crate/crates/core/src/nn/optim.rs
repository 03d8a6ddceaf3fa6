use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::ParamStore;
use super::Scalar;

/// Hyperparameters of the decoupled-weight-decay Adam optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.95,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
            max_grad_norm: Some(1.0),
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new<T: Scalar>(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Applies one update at learning rate `lr`. Returns the pre-clip gradient norm.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> f64 {
        self.t += 1;
        let norm = store
            .ids()
            .filter_map(|id| grads.param(id))
            .flat_map(|g| g.iter())
            .map(|g| {
                let g = g.as_f64();
                g * g
            })
            .sum::<f64>()
            .sqrt();
        let clip = match self.cfg.max_grad_norm {
            Some(max) if norm > max => max / (norm + 1e-12),
            _ => 1.0,
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.param(id) else { continue };
            let entry = store.entry_mut(id);
            if !entry.trainable {
                continue;
            }
            // Weight decay skips biases and norm gains (rank-1 tensors).
            let decay = if entry.value.shape().len() >= 2 {
                self.cfg.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (i, p) in entry.value.data_mut().iter_mut().enumerate() {
                let gi = g[i].as_f64() * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut pf = p.as_f64();
                pf -= lr * decay * pf;
                pf -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
                *p = T::lit(pf);
            }
        }
        norm
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (PI * progress).cos())
    }
}

/// Exponential moving average of parameters with the usual warmup ramp.
pub struct Ema<T> {
    decay: f64,
    shadow: ParamStore<T>,
    updates: u64,
}

impl<T: Scalar> Ema<T> {
    pub fn new(decay: f64, store: &ParamStore<T>) -> Self {
        Self {
            decay,
            shadow: store.clone(),
            updates: 0,
        }
    }

    pub fn update(&mut self, store: &ParamStore<T>) {
        self.updates += 1;
        let n = self.updates as f64;
        let d = self.decay.min((1.0 + n) / (10.0 + n));
        for id in store.ids() {
            let src = store.entry(id).value.data();
            for (s, &p) in self.shadow.entry_mut(id).value.data_mut().iter_mut().zip(src) {
                *s = T::lit(d * s.as_f64() + (1.0 - d) * p.as_f64());
            }
        }
    }

    pub fn weights(&self) -> &ParamStore<T> {
        &self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = CosineSchedule {
            base_lr: 1e-3,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert!((s.lr(9) - 1e-3).abs() < 1e-15);
        assert!((s.lr(60) - 5e-4).abs() < 1e-12);
        assert!(s.lr(110).abs() < 1e-15);
        assert!(s.lr(0) > 0.0);
    }
}
