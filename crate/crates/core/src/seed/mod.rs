//! The denoiser: frozen LangAE encoder scales feeding a four-level decoder of
//! EMA blocks, and the dual-space alignment loss computed through the frozen
//! autoencoder.

mod blocks;
mod train;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use blocks::{zero_params, Csa, CsaOut, EmaBlock, EmaBlockConfig, Essm, Ffn};
pub use train::{train_denoiser, DenoiserLog, DenoiserTrainConfig, EvalLog};

use crate::data::{from_model_output, to_model_input};
use crate::error::{Error, Result};
use crate::langae::{Encoder, LangAe};
use crate::metrics::Denoiser;
use crate::nn::{init_rng, Checkpoint, Conv2d, Init, ParamStore, ResBlock};
use crate::tensor::{ConvSpec, DenseTensor, Tape, Var};

/// Training arms compared in the ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Full model with both alignment terms.
    #[default]
    None,
    /// Residual blocks in place of EMA blocks.
    NoEma,
    /// A trainable encoder of the same shape instead of the frozen one.
    ResnetEncoder,
    /// Pixel loss only.
    NoLangda,
    /// Continuous alignment term only.
    LangdaC,
    /// Discrete alignment term only.
    LangdaD,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Ablation::None,
            "no-ema" => Ablation::NoEma,
            "resnet-encoder" => Ablation::ResnetEncoder,
            "no-langda" => Ablation::NoLangda,
            "langda-c" => Ablation::LangdaC,
            "langda-d" => Ablation::LangdaD,
            _ => return Err(Error::Config(format!("unknown ablation {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub block: EmaBlockConfig,
    pub ablation: Ablation,
    /// Weight of the alignment loss.
    pub lambda: f64,
    pub init_seed: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            block: EmaBlockConfig::default(),
            ablation: Ablation::None,
            lambda: 0.3,
            init_seed: 0,
        }
    }
}

impl SeedConfig {
    /// `(λ·continuous weight, λ·discrete weight)` after the ablation.
    pub fn langda_weights(&self) -> (f64, f64) {
        match self.ablation {
            Ablation::NoLangda => (0.0, 0.0),
            Ablation::LangdaC => (self.lambda, 0.0),
            Ablation::LangdaD => (0.0, self.lambda),
            _ => (self.lambda, self.lambda),
        }
    }
}

#[derive(Clone, Debug)]
enum Level {
    Ema(EmaBlock),
    Res(ResBlock, ResBlock),
}

impl Level {
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            Level::Ema(b) => b.forward(tape, store, x),
            Level::Res(a, b) => {
                let h = a.forward(tape, store, x)?;
                b.forward(tape, store, h)
            }
        }
    }
}

/// Encoder-side targets of the alignment loss for one reference image.
#[derive(Clone, Debug, PartialEq)]
pub struct LangdaTarget {
    pub z_e: DenseTensor,
    pub z_q: DenseTensor,
}

impl LangdaTarget {
    pub fn new(langae: &LangAe, y: &DenseTensor) -> Result<Self> {
        let z_e = langae.encode_value(y)?;
        let z_q = langae.quantize(&z_e)?.z_q;
        Ok(Self { z_e, z_q })
    }
}

/// Tape handles of the two alignment terms (per-element means).
pub struct LangdaVars {
    pub continuous: Var,
    pub discrete: Var,
}

fn mean_sq_to(tape: &mut Tape, a: Var, target: &DenseTensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(a, t)?;
    let s = tape.sum_sq(d)?;
    tape.scale(s, 1.0 / target.numel() as f32)
}

/// `‖z_e − ẑ_e‖²` and `‖z_q − ẑ_q‖²` with `ẑ` from `y_hat` through the frozen
/// encoder and quantizer. Gradient reaches `y_hat` only; the discrete term
/// passes through the quantizer unchanged.
pub fn langda_loss(tape: &mut Tape, langae: &LangAe, y_hat: Var, target: &LangdaTarget) -> Result<LangdaVars> {
    if !langae.is_frozen() {
        return Err(Error::invalid("alignment loss needs a frozen autoencoder"));
    }
    let enc = langae.encode(tape, y_hat)?;
    let pyr = langae.quantize(tape.value(enc.z_e))?;
    let zq_hat = tape.straight_through(enc.z_e, &pyr.z_q)?;
    let continuous = mean_sq_to(tape, enc.z_e, &target.z_e)?;
    let discrete = mean_sq_to(tape, zq_hat, &target.z_q)?;
    Ok(LangdaVars { continuous, discrete })
}

pub struct Seed {
    pub cfg: SeedConfig,
    pub store: ParamStore,
    pub langae: Arc<LangAe>,
    own_encoder: Option<Encoder>,
    levels: Vec<Level>,
    ups: Vec<Conv2d>,
    head: Conv2d,
}

impl std::fmt::Debug for Seed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Seed").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl Seed {
    pub fn new(cfg: SeedConfig, langae: Arc<LangAe>) -> Result<Self> {
        if !langae.is_frozen() {
            return Err(Error::invalid("the autoencoder must be frozen before building the denoiser"));
        }
        let c = langae.cfg.channels;
        let mut store = ParamStore::new();
        let mut rng = init_rng(cfg.init_seed);
        let mut init = Init::new(&mut store, &mut rng, "");
        let own_encoder = (cfg.ablation == Ablation::ResnetEncoder).then(|| {
            let mut s = init.scoped("own");
            Encoder::new(&mut s, &langae.cfg)
        });
        let levels = (0..4)
            .map(|i| {
                let name = format!("level{i}");
                if cfg.ablation == Ablation::NoEma {
                    let mut s = init.scoped(&name);
                    Level::Res(ResBlock::new(&mut s, "res0", c[i]), ResBlock::new(&mut s, "res1", c[i]))
                } else {
                    Level::Ema(EmaBlock::new(&mut init, &name, c[i], &cfg.block))
                }
            })
            .collect();
        let ups = (0..3)
            .map(|i| Conv2d::new(&mut init, &format!("up{i}"), c[i + 1], c[i], 3, ConvSpec::same(3), 1.0))
            .collect();
        let head = Conv2d::zeroed(&mut init, "head", c[0], 1, 3, ConvSpec::same(3));
        Ok(Self {
            cfg,
            store,
            langae,
            own_encoder,
            levels,
            ups,
            head,
        })
    }

    /// Encoder scales for `x`. The frozen encoder runs on a private tape and
    /// its activations enter as constants.
    fn scales(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        if let Some(enc) = &self.own_encoder {
            return Ok(enc.forward(tape, &self.store, x)?.scales);
        }
        let mut scratch = Tape::new();
        let xv = scratch.constant(tape.value(x).clone());
        let enc = self.langae.encode(&mut scratch, xv)?;
        Ok(enc.scales.iter().map(|&s| tape.constant(scratch.value(s).clone())).collect())
    }

    /// `1×H×W` input in the training window to the clamped estimate.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = self.scales(tape, x)?;
        let mut h = tape.add(s[4], s[3])?;
        h = self.levels[3].forward(tape, &self.store, h)?;
        for i in (0..3).rev() {
            h = tape.upsample_nearest(h, 2)?;
            h = self.ups[i].forward(tape, &self.store, h)?;
            h = tape.add(h, s[i])?;
            h = self.levels[i].forward(tape, &self.store, h)?;
        }
        let r = self.head.forward(tape, &self.store, h)?;
        let y = tape.add(x, r)?;
        tape.clamp(y, 0.0, 1.0)
    }

    /// Eval-mode estimate for a `1×H×W` input.
    pub fn predict(&self, x: &DenseTensor) -> Result<DenseTensor> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = self.forward(&mut tape, v)?;
        Ok(tape.value(y).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = toml::to_string(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Checkpoint::from_store(&self.store, &meta))
    }

    pub fn from_checkpoint(ck: &Checkpoint, langae: Arc<LangAe>) -> Result<Self> {
        let cfg: SeedConfig = toml::from_str(&ck.metadata).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let mut m = Self::new(cfg, langae)?;
        let n = m.store.load_named(ck.entries(), |name| Some(name.to_string()))?;
        if n != m.store.len() {
            return Err(Error::format("checkpoint", format!("{n} of {} tensors present", m.store.len())));
        }
        Ok(m)
    }
}

impl Denoiser for Seed {
    fn denoise(&self, ldct: &DenseTensor) -> Result<DenseTensor> {
        from_model_output(&self.predict(&to_model_input(ldct)?)?)
    }
}

#[cfg(test)]
mod tests;
