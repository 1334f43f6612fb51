use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::{ParamId, ParamStore};

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    state: BTreeMap<ParamId, (Vec<f32>, Vec<f32>)>,
    t: i32,
}

impl AdamW {
    pub fn new(beta1: f32, beta2: f32, weight_decay: f32) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<ParamId, Vec<f32>>, lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (&id, g) in grads {
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.get_mut(id);
            let (m, v) = self
                .state
                .entry(id)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at step `total - 1`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total <= 1 {
        return lr_max;
    }
    let frac = step.min(total - 1) as f64 / (total - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * frac).cos())
}
