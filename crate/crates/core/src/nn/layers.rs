//! Parameterized building blocks shared by the autoencoder and the denoiser.

use super::{Init, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{ConvSpec, Tape, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    /// Standard convolution with LeCun-normal weights scaled by `gain`.
    pub fn new(init: &mut Init<'_>, name: &str, cin: usize, cout: usize, k: usize, spec: ConvSpec, gain: f32) -> Self {
        let mut s = init.scoped(name);
        let std = gain / ((cin * k * k) as f32).sqrt();
        let weight = s.normal("weight", &[cout, cin, k, k], std);
        let bias = Some(s.zeros("bias", &[cout]));
        Self { weight, bias, spec }
    }

    pub fn depthwise(init: &mut Init<'_>, name: &str, channels: usize, k: usize) -> Self {
        let mut s = init.scoped(name);
        let std = 1.0 / (k as f32);
        let weight = s.normal("weight", &[channels, 1, k, k], std);
        let bias = Some(s.zeros("bias", &[channels]));
        Self {
            weight,
            bias,
            spec: ConvSpec::depthwise(k),
        }
    }

    /// All-zero weights and bias; the layer outputs zeros until trained.
    pub fn zeroed(init: &mut Init<'_>, name: &str, cin: usize, cout: usize, k: usize, spec: ConvSpec) -> Self {
        let mut s = init.scoped(name);
        let weight = s.zeros("weight", &[cout, cin, k, k]);
        let bias = Some(s.zeros("bias", &[cout]));
        Self { weight, bias, spec }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.bind(tape, self.weight);
        let b = self.bias.map(|b| store.bind(tape, b));
        tape.conv2d(x, w, b, self.spec)
    }
}

/// Per-position linear map over channels (a 1×1 convolution).
#[derive(Clone, Debug)]
pub struct Linear(pub Conv2d);

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, cin: usize, cout: usize) -> Self {
        Self(Conv2d::new(init, name, cin, cout, 1, ConvSpec::same(1), 1.0))
    }

    pub fn with_gain(init: &mut Init<'_>, name: &str, cin: usize, cout: usize, gain: f32) -> Self {
        Self(Conv2d::new(init, name, cin, cout, 1, ConvSpec::same(1), gain))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.0.forward(tape, store, x)
    }
}

/// `x + conv(SiLU(conv(SiLU(x))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize) -> Self {
        let mut s = init.scoped(name);
        Self {
            conv1: Conv2d::new(&mut s, "conv1", channels, channels, 3, ConvSpec::same(3), 1.0),
            conv2: Conv2d::new(&mut s, "conv2", channels, channels, 3, ConvSpec::same(3), 0.5),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = tape.silu(x)?;
        let h = self.conv1.forward(tape, store, h)?;
        let h = tape.silu(h)?;
        let h = self.conv2.forward(tape, store, h)?;
        tape.add(x, h)
    }
}

/// Single-head spatial self-attention over a `C×H×W` map with a residual path.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl AttnBlock {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize) -> Self {
        let mut s = init.scoped(name);
        Self {
            q: Linear::new(&mut s, "q", channels, channels),
            k: Linear::new(&mut s, "k", channels, channels),
            v: Linear::new(&mut s, "v", channels, channels),
            out: Linear::with_gain(&mut s, "out", channels, channels, 0.5),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (c, p) = (shape[0], shape[1] * shape[2]);
        let h = tape.layer_norm(x, &[0])?;
        let q = self.q.forward(tape, store, h)?;
        let k = self.k.forward(tape, store, h)?;
        let v = self.v.forward(tape, store, h)?;
        let q = tape.reshape(q, &[c, p])?;
        let k = tape.reshape(k, &[c, p])?;
        let v = tape.reshape(v, &[c, p])?;
        let qt = tape.transpose2d(q)?;
        let scores = tape.matmul(qt, k)?;
        let scores = tape.scale(scores, 1.0 / (c as f32).sqrt())?;
        let attn = tape.softmax_last(scores)?;
        // out[c, i] = Σ_j v[c, j] · attn[i, j]
        let at = tape.transpose2d(attn)?;
        let o = tape.matmul(v, at)?;
        let o = tape.reshape(o, &shape)?;
        let o = self.out.forward(tape, store, o)?;
        tape.add(x, o)
    }
}
