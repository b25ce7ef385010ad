use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |i| {
            let t: &Tensor = params.tensor(i);
            Tensor::zeros(t.rows, t.cols)
        };
        Self { step: 0, m: (0..params.len()).map(zeros).collect(), v: (0..params.len()).map(zeros).collect() }
    }
}

/// One decoupled-weight-decay Adam update. Parameters without a gradient
/// are left untouched.
pub fn adamw_step(params: &mut ParamStore, grads: &[Option<Tensor>], state: &mut AdamWState, lr: f64, cfg: &AdamWConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = params.tensor_mut(i);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.data.len() {
            let gj = g.data[j];
            m.data[j] = cfg.beta1 * m.data[j] + (1.0 - cfg.beta1) * gj;
            v.data[j] = cfg.beta2 * v.data[j] + (1.0 - cfg.beta2) * gj * gj;
            let mh = m.data[j] / c1;
            let vh = v.data[j] / c2;
            p.data[j] *= 1.0 - lr * cfg.weight_decay;
            p.data[j] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Linear warmup from 0 followed by cosine decay to `floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub floor: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn from_epochs(base_lr: f64, floor: f64, steps_per_epoch: usize, warmup_epochs: usize, epochs: usize) -> Self {
        Self {
            base_lr,
            floor,
            warmup_steps: warmup_epochs * steps_per_epoch,
            total_steps: epochs * steps_per_epoch,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        cosine_warmup_lr(step, self.total_steps, self.warmup_steps, self.base_lr, self.floor)
    }
}

pub fn cosine_warmup_lr(step: usize, total: usize, warmup: usize, base_lr: f64, floor: f64) -> f64 {
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base_lr;
    }
    let x = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    floor + 0.5 * (base_lr - floor) * (1.0 + (PI * x).cos())
}
