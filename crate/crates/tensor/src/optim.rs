//! Adaptive-moment optimizer with cosine learning-rate decay.

use indexmap::IndexMap;

use crate::nn::{GradMap, ParamStore};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled when their global norm exceeds this.
    pub clip_norm: f64,
    /// Total steps for the cosine schedule; 0 disables decay.
    pub total_steps: usize,
    /// Final LR as a fraction of the initial LR.
    pub min_lr_frac: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 10.0,
            total_steps: 0,
            min_lr_frac: 0.05,
        }
    }
}

#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: usize,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Cosine-decayed learning rate for the *next* step.
    pub fn current_lr(&self) -> f64 {
        if self.cfg.total_steps == 0 {
            return self.cfg.lr;
        }
        let t = (self.step as f64 / self.cfg.total_steps as f64).min(1.0);
        let floor = self.cfg.lr * self.cfg.min_lr_frac;
        floor + 0.5 * (self.cfg.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &mut GradMap) {
        let norm = grads.global_norm();
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            grads.scale(self.cfg.clip_norm / norm);
        }
        let lr = self.current_lr();
        self.step += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        for (name, grad) in grads.iter() {
            let param = match store.get_mut(name) {
                Some(p) => p,
                None => continue,
            };
            let n = grad.len();
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let data = param.array.data_mut();
            for i in 0..n {
                let gi = grad[i] + self.cfg.weight_decay * data[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}
