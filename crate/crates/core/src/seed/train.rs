use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{langda_loss, LangdaTarget, Seed, SeedConfig};
use crate::data::{to_model_input, PhantomPair};
use crate::error::{Error, Result};
use crate::langae::LangAe;
use crate::metrics::evaluate_abdominal;
use crate::nn::{cosine_lr, AdamW};
use crate::tensor::{DenseTensor, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserTrainConfig {
    pub model: SeedConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    pub seed: u64,
    /// Held-out evaluation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            model: SeedConfig::default(),
            steps: 2000,
            batch_size: 2,
            lr_max: 1e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 1e-9,
            seed: 0,
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct DenoiserLog {
    pub step: usize,
    pub lr: f64,
    pub mse: f64,
    pub langda_continuous: f64,
    pub langda_discrete: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalLog {
    pub step: usize,
    pub psnr: f64,
    pub ssim: f64,
}

struct Sample {
    x: DenseTensor,
    y: DenseTensor,
    target: Option<LangdaTarget>,
}

fn numeric_at(step: usize) -> impl Fn(Error) -> Error {
    move |e| if e.is_numeric() { Error::NonFiniteLoss { step } } else { e }
}

/// Trains a denoiser on `train` against a frozen autoencoder. `on_eval` sees
/// held-out metrics every `eval_every` steps and after the last step.
pub fn train_denoiser(
    cfg: &DenoiserTrainConfig,
    langae: Arc<LangAe>,
    train: &[PhantomPair],
    test: &[PhantomPair],
    mut on_step: impl FnMut(&DenoiserLog),
    mut on_eval: impl FnMut(&EvalLog),
) -> Result<Seed> {
    if train.is_empty() {
        return Err(Error::invalid("no training pairs"));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("steps and batch_size must be positive".into()));
    }
    let mut model = Seed::new(cfg.model.clone(), langae)?;
    let (wc, wd) = cfg.model.langda_weights();
    let aligned = wc > 0.0 || wd > 0.0;
    let samples = train
        .iter()
        .map(|p| {
            let y = to_model_input(&p.ndct)?;
            let target = if aligned {
                Some(LangdaTarget::new(&model.langae, &y)?)
            } else {
                None
            };
            Ok(Sample {
                x: to_model_input(&p.ldct)?,
                y,
                target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut run_eval = |model: &Seed, step: usize| -> Result<()> {
        if test.is_empty() {
            return Ok(());
        }
        let r = evaluate_abdominal(model, test)?;
        on_eval(&EvalLog {
            step,
            psnr: r.psnr().0,
            ssim: r.ssim().0,
        });
        Ok(())
    };
    for step in 0..cfg.steps {
        let lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min);
        let mut grads: BTreeMap<_, Vec<f32>> = BTreeMap::new();
        let mut log = DenoiserLog {
            step,
            lr,
            ..DenoiserLog::default()
        };
        let inv = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let s = &samples[rng.gen_range(0..samples.len())];
            let mut tape = Tape::new();
            let x = tape.constant(s.x.clone());
            let y_hat = model.forward(&mut tape, x).map_err(numeric_at(step))?;
            let y = tape.constant(s.y.clone());
            let d = tape.sub(y_hat, y)?;
            let sq = tape.sum_sq(d)?;
            let mse = tape.scale(sq, 1.0 / s.y.numel() as f32)?;
            let mut total = mse;
            log.mse += tape.value(mse).item() as f64 * inv;
            if let Some(target) = &s.target {
                let l = langda_loss(&mut tape, &model.langae, y_hat, target).map_err(numeric_at(step))?;
                log.langda_continuous += tape.value(l.continuous).item() as f64 * inv;
                log.langda_discrete += tape.value(l.discrete).item() as f64 * inv;
                if wc > 0.0 {
                    let t = tape.scale(l.continuous, wc as f32)?;
                    total = tape.add(total, t)?;
                }
                if wd > 0.0 {
                    let t = tape.scale(l.discrete, wd as f32)?;
                    total = tape.add(total, t)?;
                }
            }
            let tv = tape.value(total).item() as f64;
            if !tv.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            log.total += tv * inv;
            let g = tape.backward(total).map_err(numeric_at(step))?;
            for (id, gv) in g.param_grads() {
                match grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(id, gv);
                    }
                }
            }
        }
        let inv = inv as f32;
        for g in grads.values_mut() {
            g.iter_mut().for_each(|v| *v *= inv);
        }
        if grads.values().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss { step });
        }
        opt.step(&mut model.store, &grads, lr as f32);
        on_step(&log);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 != cfg.steps {
            run_eval(&model, step + 1)?;
        }
    }
    run_eval(&model, cfg.steps)?;
    Ok(model)
}
