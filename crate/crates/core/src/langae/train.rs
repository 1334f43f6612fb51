use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LangAe, LangAeConfig, LossReport};
use crate::error::{Error, Result};
use crate::nn::{cosine_lr, AdamW};
use crate::tensor::{DenseTensor, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LangAeTrainConfig {
    pub model: LangAeConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    /// Seed of the batch sampler.
    pub seed: u64,
}

impl Default for LangAeTrainConfig {
    fn default() -> Self {
        Self {
            model: LangAeConfig::default(),
            steps: 2000,
            batch_size: 2,
            lr_max: 1e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainLog {
    pub step: usize,
    pub lr: f64,
    pub report: LossReport,
}

fn numeric_at(step: usize) -> impl Fn(Error) -> Error {
    move |e| if e.is_numeric() { Error::NonFiniteLoss { step } } else { e }
}

/// Trains a fresh model on `images` (each `1×H×W` in the training window)
/// and returns it frozen. `on_step` sees every step's mean report.
pub fn train_langae(
    cfg: &LangAeTrainConfig,
    images: &[DenseTensor],
    mut on_step: impl FnMut(&TrainLog),
) -> Result<LangAe> {
    if images.is_empty() {
        return Err(Error::invalid("no training images"));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("steps and batch_size must be positive".into()));
    }
    let mut model = LangAe::new(cfg.model.clone())?;
    let pools = images.iter().map(|im| model.pools_for(im)).collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min);
        let mut grads: BTreeMap<_, Vec<f32>> = BTreeMap::new();
        let mut reports = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let i = rng.gen_range(0..images.len());
            let mut tape = Tape::new();
            let lv = model.loss(&mut tape, &images[i], &pools[i]).map_err(numeric_at(step))?;
            if !lv.report.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            reports.push(lv.report);
            let g = tape.backward(lv.total).map_err(numeric_at(step))?;
            for (id, gv) in g.param_grads() {
                match grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(id, gv);
                    }
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f32;
        for g in grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= inv);
        }
        if grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss { step });
        }
        opt.step(&mut model.store, &grads, lr as f32);
        on_step(&TrainLog {
            step,
            lr,
            report: LossReport::mean(&reports),
        });
    }
    model.freeze();
    Ok(model)
}
