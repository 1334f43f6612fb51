//! Decoder blocks: channel–spatial attention, the efficient SSM module and
//! the block that combines them.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Conv2d, Init, Linear, ParamId, ParamStore};
use crate::scan2d::Ss2d;
use crate::tensor::{ConvSpec, DenseTensor, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaBlockConfig {
    pub state: usize,
    /// ES2D sub-grid step.
    pub step: usize,
    /// Width multiplier of the ESSM inner channels.
    pub expand: usize,
    /// Channel-attention bottleneck ratio.
    pub reduction: usize,
}

impl Default for EmaBlockConfig {
    fn default() -> Self {
        Self {
            state: 8,
            step: 2,
            expand: 2,
            reduction: 8,
        }
    }
}

/// CBAM-style attention: a channel gate from pooled descriptors through a
/// shared two-layer MLP, then a spatial gate from a 7×7 convolution over the
/// channel-pooled map.
#[derive(Clone, Debug)]
pub struct Csa {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub spatial: Conv2d,
}

/// CSA output with the two gates it applied.
pub struct CsaOut {
    pub out: Var,
    pub channel_gate: Var,
    pub spatial_gate: Var,
}

impl Csa {
    pub const SPATIAL_KERNEL: usize = 7;

    pub fn new(init: &mut Init<'_>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        let mut s = init.scoped(name);
        let w1 = s.normal("mlp1.weight", &[hidden, channels], (2.0 / channels as f32).sqrt());
        let b1 = s.zeros("mlp1.bias", &[hidden, 1]);
        let w2 = s.normal("mlp2.weight", &[channels, hidden], (1.0 / hidden as f32).sqrt());
        let b2 = s.zeros("mlp2.bias", &[channels, 1]);
        let k = Self::SPATIAL_KERNEL;
        let spatial = Conv2d::new(&mut s, "spatial", 2, 1, k, ConvSpec::same(k), 1.0);
        Self {
            w1,
            b1,
            w2,
            b2,
            spatial,
        }
    }

    fn mlp(&self, tape: &mut Tape, store: &ParamStore, v: Var) -> Result<Var> {
        let c = tape.value(v).numel();
        let v = tape.reshape(v, &[c, 1])?;
        let (w1, b1) = (store.bind(tape, self.w1), store.bind(tape, self.b1));
        let (w2, b2) = (store.bind(tape, self.w2), store.bind(tape, self.b2));
        let h = tape.matmul(w1, v)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h)?;
        let o = tape.matmul(w2, h)?;
        tape.add(o, b2)
    }

    pub fn forward_gates(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<CsaOut> {
        let shape = tape.shape(x).to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let avg = tape.global_avg_pool(x)?;
        let max = tape.global_max_pool(x)?;
        let a = self.mlp(tape, store, avg)?;
        let m = self.mlp(tape, store, max)?;
        let logits = tape.add(a, m)?;
        let gate = tape.sigmoid(logits)?;
        let channel_gate = tape.reshape(gate, &[c])?;
        let f1 = tape.mul_channel(x, channel_gate)?;

        let mean = tape.channel_mean(f1)?;
        let max = tape.channel_max(f1)?;
        let mean = tape.reshape(mean, &[1, h, w])?;
        let max = tape.reshape(max, &[1, h, w])?;
        let pooled = tape.concat0(&[mean, max])?;
        let s = self.spatial.forward(tape, store, pooled)?;
        let s = tape.sigmoid(s)?;
        let spatial_gate = tape.reshape(s, &[h, w])?;
        let out = tape.mul(f1, spatial_gate)?;
        Ok(CsaOut {
            out,
            channel_gate,
            spatial_gate,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_gates(tape, store, x)?.out)
    }
}

/// Two-branch efficient SSM module:
/// `Linear(LN(ES2D(SiLU(DWConv(Linear x)))) ⊙ SiLU(Linear x))`.
#[derive(Clone, Debug)]
pub struct Essm {
    pub in_scan: Linear,
    pub dwconv: Conv2d,
    pub scan: Ss2d,
    pub in_gate: Linear,
    pub out: Linear,
    pub step: usize,
}

impl Essm {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize, cfg: &EmaBlockConfig) -> Self {
        let inner = channels * cfg.expand.max(1);
        let mut s = init.scoped(name);
        Self {
            in_scan: Linear::new(&mut s, "in_scan", channels, inner),
            dwconv: Conv2d::depthwise(&mut s, "dwconv", inner, 3),
            scan: Ss2d::new(&mut s, "es2d", inner, cfg.state),
            in_gate: Linear::new(&mut s, "in_gate", channels, inner),
            out: Linear::with_gain(&mut s, "out", inner, channels, 0.5),
            step: cfg.step,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let a = self.in_scan.forward(tape, store, x)?;
        let a = self.dwconv.forward(tape, store, a)?;
        let a = tape.silu(a)?;
        let a = self.scan.es2d(tape, store, a, self.step)?;
        let a = tape.layer_norm(a, &[0])?;
        let g = self.in_gate.forward(tape, store, x)?;
        let g = tape.silu(g)?;
        let p = tape.mul(a, g)?;
        self.out.forward(tape, store, p)
    }
}

/// `SiLU(conv3×3 x)`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub conv: Conv2d,
}

impl Ffn {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize) -> Self {
        Self {
            conv: Conv2d::new(init, name, channels, channels, 3, ConvSpec::same(3), 0.5),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.conv.forward(tape, store, x)?;
        tape.silu(h)
    }
}

/// `F′ = ESSM(F) + CSA(F) + F`, `out = FFN(F′) + F′`.
#[derive(Clone, Debug)]
pub struct EmaBlock {
    pub essm: Essm,
    pub csa: Csa,
    pub ffn: Ffn,
}

impl EmaBlock {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize, cfg: &EmaBlockConfig) -> Self {
        let mut s = init.scoped(name);
        Self {
            essm: Essm::new(&mut s, "essm", channels, cfg),
            csa: Csa::new(&mut s, "csa", channels, cfg.reduction),
            ffn: Ffn::new(&mut s, "ffn", channels),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.forward_parts(tape, store, x, true)
    }

    /// `with_essm = false` drops the ESSM term, for ablation probes.
    pub fn forward_parts(&self, tape: &mut Tape, store: &ParamStore, x: Var, with_essm: bool) -> Result<Var> {
        let c = self.csa.forward(tape, store, x)?;
        let mut f = tape.add(c, x)?;
        if with_essm {
            let e = self.essm.forward(tape, store, x)?;
            f = tape.add(e, f)?;
        }
        let o = self.ffn.forward(tape, store, f)?;
        tape.add(o, f)
    }
}

/// Zeroes every parameter whose name starts with `prefix`.
pub fn zero_params(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = DenseTensor::zeros(&shape);
    }
}
