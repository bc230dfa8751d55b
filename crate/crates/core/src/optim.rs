//! AdamW with linear warmup and cosine decay.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{Gradients, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Floor of the cosine schedule as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            min_lr_ratio: 0.0,
            warmup_steps: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl OptimConfig {
    /// Learning rate at `step` (0-based) of a `total`-step run.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let floor = self.lr * self.min_lr_ratio;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: OptimConfig,
    total_steps: usize,
    t: usize,
    state: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, total_steps: usize) -> Self {
        Self {
            cfg,
            total_steps,
            t: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.lr_at(self.t, self.total_steps)
    }

    /// Updates every trainable parameter of `store` that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let lr = self.current_lr();
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for id in store.trainable_ids() {
            let Some(g) = grads.param(store, id) else { continue };
            let g = g.to_vec();
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let w = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g[i];
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                w[i] -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * w[i]);
            }
        }
    }
}
