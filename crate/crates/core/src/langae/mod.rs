//! The language-guided autoencoder: a convolutional encoder/decoder whose
//! latent is snapped onto a frozen token codebook through the pyramid
//! quantizer.

mod train;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_rng, AttnBlock, Checkpoint, Conv2d, Init, Linear, ParamStore, ResBlock};
use crate::tensor::{ConvSpec, DenseTensor, Tape, Var};
use crate::vq::{pyramid_quantize, Codebook, HistogramScorer, PoolCache, PyramidLayout, SimilarityScorer, TokenPyramid};

pub use train::{train_langae, LangAeTrainConfig, TrainLog};

/// Loss weights of the VQGAN and semantic terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Semantic term.
    pub alpha: f64,
    /// Commitment.
    pub beta: f64,
    /// Adversarial term (stubbed to zero).
    pub gamma: f64,
    /// Perceptual term.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.3,
            gamma: 0.1,
            eta: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LangAeConfig {
    /// Stem, 1/2, 1/4 and 1/8 resolution widths.
    pub channels: [usize; 4],
    pub vocab: usize,
    /// Codebook and latent channel count.
    pub embed_dim: usize,
    pub codebook_seed: u64,
    pub scorer_seed: u64,
    pub thresholds: [f32; 3],
    pub weights: LossWeights,
    pub init_seed: u64,
}

impl Default for LangAeConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 48, 64],
            vocab: 4096,
            embed_dim: 16,
            codebook_seed: 0,
            scorer_seed: 1,
            thresholds: [0.95, 0.9, 0.8],
            weights: LossWeights::default(),
            init_seed: 0,
        }
    }
}

/// Total downsampling between image and latent.
pub const DOWNSAMPLE: usize = 8;

#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    stem: Conv2d,
    downs: Vec<Conv2d>,
    res: Vec<ResBlock>,
    attn: Vec<AttnBlock>,
    out: Linear,
}

/// Encoder activations: the five exposed scales and the latent.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Full, 1/2, 1/4, 1/8 resolution and the 1/8 bottleneck.
    pub scales: Vec<Var>,
    pub z_e: Var,
}

impl Encoder {
    pub(crate) fn new(init: &mut Init<'_>, cfg: &LangAeConfig) -> Self {
        let c = cfg.channels;
        let mut s = init.scoped("enc");
        let stem = Conv2d::new(&mut s, "stem", 1, c[0], 3, ConvSpec::same(3), 1.0);
        let downs = (0..3)
            .map(|i| Conv2d::new(&mut s, &format!("down{i}"), c[i], c[i + 1], 3, ConvSpec::strided(3, 2), 1.0))
            .collect();
        let widths = [c[0], c[1], c[2], c[3], c[3], c[3]];
        let res = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| ResBlock::new(&mut s, &format!("res{i}"), w))
            .collect();
        let attn = (0..2).map(|i| AttnBlock::new(&mut s, &format!("attn{i}"), c[3])).collect();
        let out = Linear::new(&mut s, "out", c[3], cfg.embed_dim);
        Self {
            stem,
            downs,
            res,
            attn,
            out,
        }
    }

    pub(crate) fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Encoded> {
        let mut scales = Vec::with_capacity(5);
        let h = self.stem.forward(tape, store, x)?;
        let mut h = self.res[0].forward(tape, store, h)?;
        scales.push(h);
        for i in 0..3 {
            h = self.downs[i].forward(tape, store, h)?;
            h = self.res[i + 1].forward(tape, store, h)?;
            scales.push(h);
        }
        h = self.res[4].forward(tape, store, h)?;
        h = self.attn[0].forward(tape, store, h)?;
        h = self.res[5].forward(tape, store, h)?;
        h = self.attn[1].forward(tape, store, h)?;
        scales.push(h);
        let a = tape.silu(h)?;
        let z_e = self.out.forward(tape, store, a)?;
        Ok(Encoded { scales, z_e })
    }
}

#[derive(Clone, Debug)]
struct Decoder {
    input: Conv2d,
    ups: Vec<Conv2d>,
    res: Vec<ResBlock>,
    attn: Vec<AttnBlock>,
    out: Conv2d,
}

impl Decoder {
    fn new(init: &mut Init<'_>, cfg: &LangAeConfig) -> Self {
        let c = cfg.channels;
        let mut s = init.scoped("dec");
        let input = Conv2d::new(&mut s, "in", cfg.embed_dim, c[3], 3, ConvSpec::same(3), 1.0);
        let ups = (0..3)
            .map(|i| Conv2d::new(&mut s, &format!("up{i}"), c[3 - i], c[2 - i], 3, ConvSpec::same(3), 1.0))
            .collect();
        let widths = [c[3], c[3], c[2], c[1], c[0], c[0]];
        let res = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| ResBlock::new(&mut s, &format!("res{i}"), w))
            .collect();
        let attn = (0..2).map(|i| AttnBlock::new(&mut s, &format!("attn{i}"), c[3])).collect();
        let out = Conv2d::new(&mut s, "out", c[0], 1, 3, ConvSpec::same(3), 0.5);
        Self {
            input,
            ups,
            res,
            attn,
            out,
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let mut h = self.input.forward(tape, store, z)?;
        h = self.res[0].forward(tape, store, h)?;
        h = self.attn[0].forward(tape, store, h)?;
        h = self.res[1].forward(tape, store, h)?;
        h = self.attn[1].forward(tape, store, h)?;
        for i in 0..3 {
            h = tape.upsample_nearest(h, 2)?;
            h = self.ups[i].forward(tape, store, h)?;
            h = self.res[i + 2].forward(tape, store, h)?;
        }
        h = self.res[5].forward(tape, store, h)?;
        let a = tape.silu(h)?;
        let y = self.out.forward(tape, store, a)?;
        tape.clamp(y, 0.0, 1.0)
    }
}

/// Frozen random-weight convolutional pyramid standing in for a pretrained
/// feature network.
#[derive(Clone, Debug)]
struct Perceptual {
    convs: Vec<Conv2d>,
}

impl Perceptual {
    const WIDTHS: [usize; 4] = [1, 8, 16, 32];

    fn new(init: &mut Init<'_>) -> Self {
        let mut s = init.scoped("perceptual");
        let convs = (0..3)
            .map(|i| {
                let spec = if i == 0 {
                    ConvSpec::same(3)
                } else {
                    ConvSpec::strided(3, 2)
                };
                Conv2d::new(&mut s, &format!("conv{i}"), Self::WIDTHS[i], Self::WIDTHS[i + 1], 3, spec, 2f32.sqrt())
            })
            .collect();
        Self { convs }
    }

    fn features(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(3);
        let mut h = x;
        for c in &self.convs {
            h = c.forward(tape, store, h)?;
            h = tape.relu(h)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Scalar components of one LangAE loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub reconstruction: f64,
    pub commitment: f64,
    pub gan: f64,
    pub perceptual: f64,
    pub semantic: f64,
    /// Detached ratio `L_VQGAN / L_sem`.
    pub omega: f64,
    pub vqgan: f64,
    pub total: f64,
}

/// Below this the semantic term is treated as absent and ω is 0.
pub const SEMANTIC_FLOOR: f64 = 1e-8;

pub fn dynamic_weight(vqgan: f64, semantic: f64) -> f64 {
    if semantic < SEMANTIC_FLOOR {
        0.0
    } else {
        vqgan / semantic
    }
}

impl LossReport {
    /// Assembles the report from its raw components.
    pub fn compose(rec: f64, commit: f64, gan: f64, perceptual: f64, semantic: f64, w: &LossWeights) -> Self {
        let vqgan = rec + w.beta * commit + w.gamma * gan + w.eta * perceptual;
        let omega = dynamic_weight(vqgan, semantic);
        Self {
            reconstruction: rec,
            commitment: commit,
            gan,
            perceptual,
            semantic,
            omega,
            vqgan,
            total: vqgan + w.alpha * omega * semantic,
        }
    }

    /// The total rebuilt from the stored components.
    pub fn recomposed_total(&self, w: &LossWeights) -> f64 {
        let vq = self.reconstruction + w.beta * self.commitment + w.gamma * self.gan + w.eta * self.perceptual;
        vq + w.alpha * self.omega * self.semantic
    }

    pub fn mean(reports: &[LossReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mut m = Self::default();
        for r in reports {
            m.reconstruction += r.reconstruction / n;
            m.commitment += r.commitment / n;
            m.gan += r.gan / n;
            m.perceptual += r.perceptual / n;
            m.semantic += r.semantic / n;
            m.omega += r.omega / n;
            m.vqgan += r.vqgan / n;
            m.total += r.total / n;
        }
        m
    }
}

/// The adversarial term is not trained; it contributes a constant zero.
pub fn gan_loss() -> f64 {
    0.0
}

/// Tape handles of one loss evaluation.
pub struct LossVars {
    pub total: Var,
    pub vqgan: Var,
    pub semantic: Var,
    pub recon: Var,
    pub report: LossReport,
    pub pyramid: TokenPyramid,
}

pub struct LangAe {
    pub cfg: LangAeConfig,
    pub store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    perceptual: Perceptual,
    pub codebook: Arc<Codebook>,
    pub scorer: HistogramScorer,
    pools: PoolCache,
}

impl std::fmt::Debug for LangAe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LangAe").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

fn mean_sq_diff(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let n = tape.value(a).numel();
    let d = tape.sub(a, b)?;
    let s = tape.sum_sq(d)?;
    tape.scale(s, 1.0 / n as f32)
}

impl LangAe {
    pub fn new(cfg: LangAeConfig) -> Result<Self> {
        let codebook = Arc::new(Codebook::generate(cfg.vocab, cfg.embed_dim, cfg.codebook_seed)?);
        Self::with_codebook(cfg, codebook)
    }

    pub fn with_codebook(cfg: LangAeConfig, codebook: Arc<Codebook>) -> Result<Self> {
        if codebook.dim() != cfg.embed_dim {
            return Err(Error::Config(format!(
                "codebook dim {} does not match embed_dim {}",
                codebook.dim(),
                cfg.embed_dim
            )));
        }
        if cfg.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("zero channel width".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = init_rng(cfg.init_seed);
        let mut init = Init::new(&mut store, &mut rng, "");
        let encoder = Encoder::new(&mut init, &cfg);
        let decoder = Decoder::new(&mut init, &cfg);
        let perceptual = Perceptual::new(&mut init);
        store.set_trainable_prefix("perceptual.", false);
        let scorer = HistogramScorer::new(codebook.len(), cfg.scorer_seed);
        Ok(Self {
            cfg,
            store,
            encoder,
            decoder,
            perceptual,
            codebook,
            scorer,
            pools: PoolCache::new(),
        })
    }

    pub fn layout(&self, h: usize, w: usize) -> Result<PyramidLayout> {
        PyramidLayout::dilated(h / DOWNSAMPLE, w / DOWNSAMPLE, self.cfg.thresholds)
    }

    fn check_image(&self, shape: &[usize]) -> Result<(usize, usize)> {
        match *shape {
            [1, h, w] if h % DOWNSAMPLE == 0 && w % DOWNSAMPLE == 0 && h >= 2 * DOWNSAMPLE && w >= 2 * DOWNSAMPLE => {
                Ok((h, w))
            }
            _ => Err(Error::invalid(format!(
                "LangAE input must be 1×H×W with H, W multiples of {DOWNSAMPLE} and at least {}, got {shape:?}",
                2 * DOWNSAMPLE
            ))),
        }
    }

    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Encoded> {
        self.check_image(tape.shape(x))?;
        self.encoder.forward(tape, &self.store, x)
    }

    pub fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        match *tape.shape(z) {
            [c, h, w] if c == self.cfg.embed_dim && h >= 2 && w >= 2 => {}
            _ => return Err(Error::shape("decode", &[self.cfg.embed_dim, 0, 0], tape.shape(z))),
        }
        self.decoder.forward(tape, &self.store, z)
    }

    pub fn quantize(&self, z_e: &DenseTensor) -> Result<TokenPyramid> {
        let layout = PyramidLayout::dilated(z_e.shape()[1], z_e.shape()[2], self.cfg.thresholds)?;
        pyramid_quantize(z_e, &layout, &self.codebook)
    }

    /// Eval-mode latent of a `1×H×W` image in the training window.
    pub fn encode_value(&self, image: &DenseTensor) -> Result<DenseTensor> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let e = self.encode(&mut tape, x)?;
        Ok(tape.value(e.z_e).clone())
    }

    /// Encode, quantize and decode without gradients.
    pub fn reconstruct(&self, image: &DenseTensor) -> Result<DenseTensor> {
        let z = self.encode_value(image)?;
        let pyr = self.quantize(&z)?;
        let mut tape = Tape::new();
        let zq = tape.constant(pyr.z_q);
        let y = self.decode(&mut tape, zq)?;
        Ok(tape.value(y).clone())
    }

    pub fn perceptual_loss(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        if tape.shape(a) != tape.shape(b) {
            return Err(Error::shape("perceptual_loss", tape.shape(a), tape.shape(b)));
        }
        let fa = self.perceptual.features(tape, &self.store, a)?;
        let fb = self.perceptual.features(tape, &self.store, b)?;
        let mut terms = Vec::with_capacity(fa.len());
        for (x, y) in fa.into_iter().zip(fb) {
            terms.push(mean_sq_diff(tape, x, y)?);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        tape.scale(acc, 1.0 / terms.len() as f32)
    }

    /// Candidate pools for an image, cached by content.
    pub fn pools_for(&self, image: &DenseTensor) -> Result<Arc<Vec<Vec<u32>>>> {
        let (h, w) = self.check_image(image.shape())?;
        Ok(self.pools.get_or_build(image, &self.scorer, &self.layout(h, w)?))
    }

    /// Full training objective for one image `y` (`1×H×W`, `[0, 1]`).
    /// Reconstruction, commitment and perceptual terms are per-element means.
    pub fn loss(&self, tape: &mut Tape, y: &DenseTensor, pools: &[Vec<u32>]) -> Result<LossVars> {
        let w = self.cfg.weights;
        let yv = tape.constant(y.clone());
        let enc = self.encode(tape, yv)?;
        let pyr = pyramid_quantize(tape.value(enc.z_e), &self.layout(y.shape()[1], y.shape()[2])?, &self.codebook)?;
        let zq = tape.straight_through(enc.z_e, &pyr.z_q)?;
        let y_rec = self.decode(tape, zq)?;

        let recon = mean_sq_diff(tape, yv, y_rec)?;
        let commit_sum = tape.pyramid_commitment(enc.z_e, &pyr)?;
        let commit = tape.scale(commit_sum, 1.0 / tape.value(enc.z_e).numel() as f32)?;
        let perc = self.perceptual_loss(tape, y_rec, yv)?;
        let sem = tape.semantic_loss(enc.z_e, &pyr, pools, &self.codebook)?;

        let a = tape.scale(commit, w.beta as f32)?;
        let vq = tape.add(recon, a)?;
        let p = tape.scale(perc, w.eta as f32)?;
        let vq = tape.add(vq, p)?;
        // the adversarial term is the constant zero and adds nothing on the tape

        let val = |t: &Tape, v: Var| t.value(v).item() as f64;
        let vq_val = val(tape, vq);
        let sem_val = val(tape, sem);
        let omega = dynamic_weight(vq_val, sem_val);
        let weighted = tape.scale(sem, (w.alpha * omega) as f32)?;
        let total = tape.add(vq, weighted)?;
        let report = LossReport {
            reconstruction: val(tape, recon),
            commitment: val(tape, commit),
            gan: gan_loss(),
            perceptual: val(tape, perc),
            semantic: sem_val,
            omega,
            vqgan: vq_val,
            total: val(tape, total),
        };
        Ok(LossVars {
            total,
            vqgan: vq,
            semantic: sem,
            recon,
            report,
            pyramid: pyr,
        })
    }

    /// Freezes every parameter.
    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.num_trainable() == 0
    }

    /// Bytes of all parameters, for equality checks.
    pub fn fingerprint(&self) -> Vec<u8> {
        self.store.fingerprint("")
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = toml::to_string(&self.cfg).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Checkpoint::from_store(&self.store, &meta))
    }

    /// Rebuilds the model described by a checkpoint's metadata and loads its
    /// tensors. The codebook is regenerated from its seed.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg: LangAeConfig = toml::from_str(&ck.metadata).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        let mut m = Self::new(cfg)?;
        let n = m
            .store
            .load_named(ck.entries(), |name| Some(name.to_string()))?;
        if n != m.store.len() {
            return Err(Error::format("checkpoint", format!("{n} of {} tensors present", m.store.len())));
        }
        m.freeze();
        Ok(m)
    }

    /// Per-scale cosine similarity between encoder features of two images,
    /// after removing each channel's mean.
    pub fn feature_similarity(&self, a: &DenseTensor, b: &DenseTensor) -> Result<Vec<f64>> {
        let feats = |img: &DenseTensor| -> Result<Vec<DenseTensor>> {
            let mut tape = Tape::new();
            let x = tape.constant(img.clone());
            let e = self.encode(&mut tape, x)?;
            Ok(e.scales.iter().map(|&s| tape.value(s).clone()).collect())
        };
        let (fa, fb) = (feats(a)?, feats(b)?);
        Ok(fa.iter().zip(&fb).map(|(x, y)| centered_cosine(x, y)).collect())
    }

    /// Layer-1 token grid and the `top_k` most frequent tokens of each deeper
    /// layer for one image.
    pub fn export_tokens(&self, image: &DenseTensor, top_k: usize) -> Result<TokenExport> {
        let pyr = self.quantize(&self.encode_value(image)?)?;
        let layers = pyr.tokens.len();
        let side = (pyr.tokens[0].len() as f64).sqrt().round() as usize;
        let names = pyr.layer_tokens(0, &self.codebook);
        let grid = names.chunks(side.max(1)).map(|r| r.iter().map(|s| s.to_string()).collect()).collect();
        let top = (1..layers)
            .map(|l| {
                let mut counts = std::collections::BTreeMap::<u32, usize>::new();
                for &t in &pyr.tokens[l] {
                    *counts.entry(t).or_default() += 1;
                }
                let mut v: Vec<(u32, usize)> = counts.into_iter().collect();
                v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                v.into_iter().take(top_k).map(|(t, c)| (self.codebook.token(t).to_string(), c)).collect()
            })
            .collect();
        Ok(TokenExport { grid, top })
    }

    pub fn vocab(&self) -> usize {
        self.scorer.vocab()
    }
}

/// Cosine similarity after subtracting the per-channel mean (leading axis).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenExport {
    /// Layer-1 tokens, row-major.
    pub grid: Vec<Vec<String>>,
    /// `(token, count)` for layers 2 and up, most frequent first.
    pub top: Vec<Vec<(String, usize)>>,
}

pub fn centered_cosine(a: &DenseTensor, b: &DenseTensor) -> f64 {
    let c = a.shape()[0];
    let n = a.numel() / c;
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..c {
        let xa = &a.data()[k * n..(k + 1) * n];
        let xb = &b.data()[k * n..(k + 1) * n];
        let ma = xa.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let mb = xb.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        for (&p, &q) in xa.iter().zip(xb) {
            let (p, q) = (p as f64 - ma, q as f64 - mb);
            dot += p * q;
            na += p * p;
            nb += q * q;
        }
    }
    dot / (na.sqrt() * nb.sqrt()).max(1e-300)
}

#[cfg(test)]
mod tests;
