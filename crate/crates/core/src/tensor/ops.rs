//! Differentiable operations recorded on the [`Tape`].

use super::kernels::{self, ConvGeom};
use super::{DenseTensor, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Silu,
    Sigmoid,
    Relu,
    Exp,
    Softplus,
    Neg,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    Standard,
    /// One `k×k` kernel per input channel; weight shape `[C, 1, k, k]`.
    Depthwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub mode: ConvMode,
}

impl ConvSpec {
    pub fn same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
            mode: ConvMode::Standard,
        }
    }

    pub fn strided(k: usize, stride: usize) -> Self {
        Self {
            stride,
            padding: k / 2,
            mode: ConvMode::Standard,
        }
    }

    pub fn depthwise(k: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
            mode: ConvMode::Depthwise,
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Which operand (if any) is repeated to match the other.
#[derive(Clone, Copy)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    let (na, nb): (usize, usize) = (a.iter().product(), b.iter().product());
    if a == b {
        Ok((a.to_vec(), Broadcast::None))
    } else if (nb == 1 && (na > 1 || a.len() >= b.len())) || is_suffix(b, a) {
        Ok((a.to_vec(), Broadcast::Rhs))
    } else if na == 1 || is_suffix(a, b) {
        Ok((b.to_vec(), Broadcast::Lhs))
    } else {
        Err(Error::shape(op, a, b))
    }
}

/// Sums a full-size gradient down to a repeated operand of length `n`.
fn reduce_periodic(full: &[f32], n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; n];
    for chunk in full.chunks_exact(n) {
        for (a, v) in acc.iter_mut().zip(chunk) {
            *a += *v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

fn spatial(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::invalid(format!("{op} expects C×H×W, got {shape:?}"))),
    }
}

fn leading(shape: &[usize]) -> (usize, usize) {
    let c = shape[0];
    (c, shape[1..].iter().product())
}

impl Tape {
    // ---------------------------------------------------------------- elementwise

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let op = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let (shape, bc) = broadcast(op, self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (na, nb) = (av.len(), bv.len());
        let n: usize = shape.iter().product();
        let f = |x: f32, y: f32| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let data: Vec<f32> = match bc {
            Broadcast::None => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(av[i % na], bv[i % nb])).collect(),
        };
        let value = DenseTensor::new(&shape, data)?;
        self.record(
            op,
            &[a, b],
            value,
            Box::new(move |ctx| {
                let g = ctx.grad;
                let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let (na, nb) = (av.len(), bv.len());
                let ga = ctx.needs(0).then(|| {
                    let full: Vec<f32> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                        BinaryKind::Mul => g.iter().enumerate().map(|(i, gi)| gi * bv[i % nb]).collect(),
                    };
                    if na == full.len() {
                        full
                    } else {
                        reduce_periodic(&full, na)
                    }
                });
                let gb = ctx.needs(1).then(|| {
                    let full: Vec<f32> = match kind {
                        BinaryKind::Add => g.to_vec(),
                        BinaryKind::Sub => g.iter().map(|v| -v).collect(),
                        BinaryKind::Mul => g.iter().enumerate().map(|(i, gi)| gi * av[i % na]).collect(),
                    };
                    if nb == full.len() {
                        full
                    } else {
                        reduce_periodic(&full, nb)
                    }
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data: Vec<f32> = xv
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Silu => v * sigmoid(v),
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Softplus => softplus(v),
                UnaryKind::Neg => -v,
                UnaryKind::Square => v * v,
            })
            .collect();
        let value = DenseTensor::new(xv.shape(), data)?;
        let op = match kind {
            UnaryKind::Silu => "silu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Relu => "relu",
            UnaryKind::Exp => "exp",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Neg => "neg",
            UnaryKind::Square => "square",
        };
        self.record(
            op,
            &[x],
            value,
            Box::new(move |ctx| {
                let xs = ctx.inputs[0].data();
                let ys = ctx.output.data();
                let gx = ctx
                    .grad
                    .iter()
                    .zip(xs.iter().zip(ys))
                    .map(|(g, (&x, &y))| {
                        g * match kind {
                            UnaryKind::Silu => {
                                let s = sigmoid(x);
                                s * (1.0 + x * (1.0 - s))
                            }
                            UnaryKind::Sigmoid => y * (1.0 - y),
                            UnaryKind::Relu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Exp => y,
                            UnaryKind::Softplus => sigmoid(x),
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Square => 2.0 * x,
                        }
                    })
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    /// `x * factor` for a constant factor.
    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let xv = self.value(x);
        let value = DenseTensor::new(xv.shape(), xv.data().iter().map(|v| v * factor).collect())?;
        self.record(
            "scale",
            &[x],
            value,
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|g| g * factor).collect())]),
        )
    }

    /// Clamp into `[lo, hi]`; the gradient passes where the input lies inside the
    /// closed interval.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        let xv = self.value(x);
        let value = DenseTensor::new(xv.shape(), xv.data().iter().map(|v| v.clamp(lo, hi)).collect())?;
        self.record(
            "clamp",
            &[x],
            value,
            Box::new(move |ctx| {
                let xs = ctx.inputs[0].data();
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(xs)
                        .map(|(g, &x)| if (lo..=hi).contains(&x) { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.record(
            "sum",
            &[x],
            DenseTensor::scalar(s as f32),
            Box::new(|ctx| vec![Some(vec![ctx.grad[0]; ctx.inputs[0].numel()])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f32)
    }

    /// `Σ x²`, accumulated in f64.
    pub fn sum_sq(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        self.record(
            "sum_sq",
            &[x],
            DenseTensor::scalar(s as f32),
            Box::new(|ctx| {
                let g = ctx.grad[0];
                vec![Some(ctx.inputs[0].data().iter().map(|v| 2.0 * g * v).collect())]
            }),
        )
    }

    /// `Σ wᵢ xᵢ` for constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f32]) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.numel() {
            return Err(Error::shape("weighted_sum", xv.shape(), &[weights.len()]));
        }
        let s: f64 = xv.data().iter().zip(weights).map(|(&a, &b)| a as f64 * b as f64).sum();
        let w = weights.to_vec();
        self.record(
            "weighted_sum",
            &[x],
            DenseTensor::scalar(s as f32),
            Box::new(move |ctx| vec![Some(w.iter().map(|v| v * ctx.grad[0]).collect())]),
        )
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = DenseTensor::new(&[m, n], out)?;
        self.record(
            "matmul",
            &[a, b],
            value,
            Box::new(move |ctx| {
                let (av, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.needs(0).then(|| {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm_nt(m, n, k, ctx.grad, bv, &mut ga);
                    ga
                });
                let gb = ctx.needs(1).then(|| {
                    let at = kernels::transpose(m, k, av);
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_nn(k, m, n, &at, ctx.grad, &mut gb);
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let (r, c) = match self.shape(x) {
            [r, c] => (*r, *c),
            s => return Err(Error::invalid(format!("transpose2d expects rank 2, got {s:?}"))),
        };
        let value = DenseTensor::new(&[c, r], kernels::transpose(r, c, self.value(x).data()))?;
        self.record(
            "transpose2d",
            &[x],
            value,
            Box::new(move |ctx| vec![Some(kernels::transpose(c, r, ctx.grad))]),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("rank ≥ 1");
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v as f64;
            }
            let inv = (1.0 / s) as f32;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let value = DenseTensor::new(xv.shape(), out)?;
        self.record(
            "softmax",
            &[x],
            value,
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let mut gx = vec![0.0; y.len()];
                for ((gr, yr), out) in ctx
                    .grad
                    .chunks_exact(n)
                    .zip(y.chunks_exact(n))
                    .zip(gx.chunks_exact_mut(n))
                {
                    let dotv: f64 = gr.iter().zip(yr).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                    let d = dotv as f32;
                    for i in 0..n {
                        out[i] = yr[i] * (gr[i] - d);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    // ---------------------------------------------------------------- shape

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.record("reshape", &[x], value, Box::new(|ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// Concatenates along axis 0; trailing extents must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != first[1..] {
                return Err(Error::shape("concat0", &first, s));
            }
            lead += s[0];
            sizes.push(self.value(p).numel());
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first.clone();
        shape[0] = lead;
        let value = DenseTensor::new(&shape, data)?;
        self.record(
            "concat0",
            parts,
            value,
            Box::new(move |ctx| {
                let mut off = 0;
                sizes
                    .iter()
                    .enumerate()
                    .map(|(i, &n)| {
                        let g = ctx.needs(i).then(|| ctx.grad[off..off + n].to_vec());
                        off += n;
                        g
                    })
                    .collect()
            }),
        )
    }

    /// Selects columns `idx` of a `[R × P]` matrix.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, p) = match self.shape(x) {
            [r, p] => (*r, *p),
            s => return Err(Error::invalid(format!("gather_cols expects rank 2, got {s:?}"))),
        };
        if let Some(&bad) = idx.iter().find(|&&i| i >= p) {
            return Err(Error::invalid(format!("gather index {bad} out of range {p}")));
        }
        let m = idx.len();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * m);
        for row in 0..r {
            out.extend(idx.iter().map(|&j| xv[row * p + j]));
        }
        let value = DenseTensor::new(&[r, m], out)?;
        let idx = idx.to_vec();
        self.record(
            "gather_cols",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut gx = vec![0.0; r * p];
                for row in 0..r {
                    for (k, &j) in idx.iter().enumerate() {
                        gx[row * p + j] += ctx.grad[row * m + k];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    // ---------------------------------------------------------------- channel-wise (axis 0)

    /// Adds `b[c]` to every element of channel `c`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        self.channel_binary("bias_add", x, b, false)
    }

    /// Multiplies channel `c` by `g[c]`.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        self.channel_binary("mul_channel", x, g, true)
    }

    fn channel_binary(&mut self, op: &'static str, x: Var, b: Var, multiply: bool) -> Result<Var> {
        let (c, rest) = leading(self.shape(x));
        if self.value(b).numel() != c {
            return Err(Error::shape(op, self.shape(x), self.shape(b)));
        }
        let (xv, bv) = (self.value(x).data(), self.value(b).data());
        let mut out = xv.to_vec();
        for (ch, chunk) in out.chunks_exact_mut(rest).enumerate() {
            let s = bv[ch];
            if multiply {
                chunk.iter_mut().for_each(|v| *v *= s);
            } else {
                chunk.iter_mut().for_each(|v| *v += s);
            }
        }
        let value = DenseTensor::new(self.shape(x), out)?;
        self.record(
            op,
            &[x, b],
            value,
            Box::new(move |ctx| {
                let (xv, bv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let gx = ctx.needs(0).then(|| {
                    if multiply {
                        let mut gx = ctx.grad.to_vec();
                        for (ch, chunk) in gx.chunks_exact_mut(rest).enumerate() {
                            chunk.iter_mut().for_each(|v| *v *= bv[ch]);
                        }
                        gx
                    } else {
                        ctx.grad.to_vec()
                    }
                });
                let gb = ctx.needs(1).then(|| {
                    (0..c)
                        .map(|ch| {
                            let gs = &ctx.grad[ch * rest..(ch + 1) * rest];
                            let s: f64 = if multiply {
                                gs.iter()
                                    .zip(&xv[ch * rest..(ch + 1) * rest])
                                    .map(|(g, x)| (*g as f64) * (*x as f64))
                                    .sum()
                            } else {
                                gs.iter().map(|&g| g as f64).sum()
                            };
                            s as f32
                        })
                        .collect()
                });
                vec![gx, gb]
            }),
        )
    }

    /// Per-channel mean over all trailing positions: `[C, ...] → [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, rest) = leading(self.shape(x));
        let xv = self.value(x).data();
        let out: Vec<f32> = xv
            .chunks_exact(rest)
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / rest as f64) as f32)
            .collect();
        let value = DenseTensor::new(&[c], out)?;
        self.record(
            "global_avg_pool",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut gx = vec![0.0; c * rest];
                for (ch, chunk) in gx.chunks_exact_mut(rest).enumerate() {
                    let g = ctx.grad[ch] / rest as f32;
                    chunk.iter_mut().for_each(|v| *v = g);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Per-channel maximum; the gradient routes to the first arg-max.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (c, rest) = leading(self.shape(x));
        let xv = self.value(x).data();
        let mut arg = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c);
        for ch in xv.chunks_exact(rest) {
            let (i, v) = ch
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
            arg.push(i);
            out.push(v);
        }
        let value = DenseTensor::new(&[c], out)?;
        self.record(
            "global_max_pool",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut gx = vec![0.0; c * rest];
                for (ch, &i) in arg.iter().enumerate() {
                    gx[ch * rest + i] = ctx.grad[ch];
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Mean across channels at each position: `[C, ...] → [...]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (c, rest) = leading(&shape);
        let xv = self.value(x).data();
        let mut acc = vec![0.0f64; rest];
        for ch in xv.chunks_exact(rest) {
            acc.iter_mut().zip(ch).for_each(|(a, &v)| *a += v as f64);
        }
        let out = acc.into_iter().map(|v| (v / c as f64) as f32).collect();
        let value = DenseTensor::new(&shape[1..], out)?;
        self.record(
            "channel_mean",
            &[x],
            value,
            Box::new(move |ctx| {
                let inv = 1.0 / c as f32;
                let mut gx = Vec::with_capacity(c * rest);
                for _ in 0..c {
                    gx.extend(ctx.grad.iter().map(|g| g * inv));
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Maximum across channels at each position.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (_, rest) = leading(&shape);
        let xv = self.value(x).data();
        let mut out = vec![f32::NEG_INFINITY; rest];
        let mut arg = vec![0u32; rest];
        for (ci, ch) in xv.chunks_exact(rest).enumerate() {
            for (p, &v) in ch.iter().enumerate() {
                if v > out[p] {
                    out[p] = v;
                    arg[p] = ci as u32;
                }
            }
        }
        let value = DenseTensor::new(&shape[1..], out)?;
        self.record(
            "channel_max",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut gx = vec![0.0; ctx.inputs[0].numel()];
                for (p, &ci) in arg.iter().enumerate() {
                    gx[ci as usize * rest + p] = ctx.grad[p];
                }
                vec![Some(gx)]
            }),
        )
    }

    // ---------------------------------------------------------------- normalization

    /// Normalizes every slice spanned by `axes` to zero mean and unit population
    /// variance (`eps = 1e-5` inside the square root). No affine transform.
    pub fn layer_norm(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        if axes.is_empty() {
            return Err(Error::invalid("layer_norm needs at least one axis"));
        }
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::invalid(format!("layer_norm axes {axes:?} out of range for {shape:?}")));
        }
        let (outer_off, inner_off) = slice_offsets(&shape, axes);
        let inner = inner_off.len();
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; xv.len()];
        let mut inv_std = Vec::with_capacity(outer_off.len());
        for &o in &outer_off {
            let mean = inner_off.iter().map(|&i| xv[o + i] as f64).sum::<f64>() / inner as f64;
            let var = inner_off
                .iter()
                .map(|&i| {
                    let d = xv[o + i] as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / inner as f64;
            let is = 1.0 / (var + EPS).sqrt();
            for &i in &inner_off {
                out[o + i] = ((xv[o + i] as f64 - mean) * is) as f32;
            }
            inv_std.push(is);
        }
        let value = DenseTensor::new(&shape, out)?;
        self.record(
            "layer_norm",
            &[x],
            value,
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad;
                let mut gx = vec![0.0f32; y.len()];
                for (&o, &is) in outer_off.iter().zip(&inv_std) {
                    let mut mg = 0.0f64;
                    let mut mgy = 0.0f64;
                    for &i in &inner_off {
                        mg += g[o + i] as f64;
                        mgy += g[o + i] as f64 * y[o + i] as f64;
                    }
                    mg /= inner as f64;
                    mgy /= inner as f64;
                    for &i in &inner_off {
                        gx[o + i] = (is * (g[o + i] as f64 - mg - y[o + i] as f64 * mgy)) as f32;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    // ---------------------------------------------------------------- images (C×H×W)

    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (cin, h, wd) = spatial(self.shape(x), "conv2d")?;
        let ws = self.shape(w).to_vec();
        let (cout, k) = match (&ws[..], spec.mode) {
            ([co, ci, k, k2], ConvMode::Standard) if *ci == cin && k == k2 => (*co, *k),
            ([co, 1, k, k2], ConvMode::Depthwise) if *co == cin && k == k2 => (*co, *k),
            _ => return Err(Error::shape("conv2d", self.shape(x), &ws)),
        };
        if spec.stride == 0 {
            return Err(Error::invalid("conv2d stride must be ≥ 1"));
        }
        let (ph, pw) = (h + 2 * spec.padding, wd + 2 * spec.padding);
        if k > ph || k > pw {
            return Err(Error::invalid(format!(
                "conv2d kernel {k}×{k} larger than padded input {ph}×{pw}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != cout {
                return Err(Error::shape("conv2d bias", &[cout], self.shape(b)));
            }
        }
        let geom = ConvGeom {
            channels: cin,
            h,
            w: wd,
            k,
            stride: spec.stride,
            pad: spec.padding,
            out_h: (ph - k) / spec.stride + 1,
            out_w: (pw - k) / spec.stride + 1,
        };
        let n = geom.out_len();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0f32; cout * n];
        match spec.mode {
            ConvMode::Standard => {
                let kk = cin * k * k;
                if k == 1 && spec.stride == 1 && spec.padding == 0 {
                    kernels::gemm_nn(cout, kk, n, wv, xv, &mut out);
                } else {
                    let col = kernels::im2col(&geom, xv);
                    kernels::gemm_nn(cout, kk, n, wv, &col, &mut out);
                }
            }
            ConvMode::Depthwise => depthwise_forward(&geom, xv, wv, &mut out),
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (ch, chunk) in out.chunks_exact_mut(n).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bv[ch]);
            }
        }
        let value = DenseTensor::new(&[cout, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.record(
            "conv2d",
            &inputs,
            value,
            Box::new(move |ctx| {
                let (xv, wv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad;
                let mut res = match spec.mode {
                    ConvMode::Standard => {
                        let kk = cin * k * k;
                        let pointwise = k == 1 && spec.stride == 1 && spec.padding == 0;
                        let col_owned;
                        let col: &[f32] = if !ctx.needs(1) {
                            &[]
                        } else if pointwise {
                            xv
                        } else {
                            col_owned = kernels::im2col(&geom, xv);
                            &col_owned
                        };
                        let gw = ctx.needs(1).then(|| {
                            let mut gw = vec![0.0; cout * kk];
                            kernels::gemm_nt(cout, n, kk, g, col, &mut gw);
                            gw
                        });
                        let gx = ctx.needs(0).then(|| {
                            let wt = kernels::transpose(cout, kk, wv);
                            let mut dcol = vec![0.0; kk * n];
                            kernels::gemm_nn(kk, cout, n, &wt, g, &mut dcol);
                            if pointwise {
                                dcol
                            } else {
                                let mut gx = vec![0.0; cin * geom.h * geom.w];
                                kernels::col2im(&geom, &dcol, &mut gx);
                                gx
                            }
                        });
                        vec![gx, gw]
                    }
                    ConvMode::Depthwise => {
                        let (gx, gw) = depthwise_backward(&geom, xv, wv, g, ctx.needs(0), ctx.needs(1));
                        vec![gx, gw]
                    }
                };
                if has_bias {
                    res.push(ctx.needs(2).then(|| {
                        g.chunks_exact(n)
                            .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() as f32)
                            .collect()
                    }));
                }
                res
            }),
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = spatial(self.shape(x), "upsample_nearest")?;
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let src = &xv[ch * h * w + (oy / factor) * w..][..w];
                let dst = &mut out[ch * oh * ow + oy * ow..][..ow];
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d = src[ox / factor];
                }
            }
        }
        let value = DenseTensor::new(&[c, oh, ow], out)?;
        self.record(
            "upsample_nearest",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut gx = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        let g = &ctx.grad[ch * oh * ow + oy * ow..][..ow];
                        let dst = &mut gx[ch * h * w + (oy / factor) * w..][..w];
                        for (ox, v) in g.iter().enumerate() {
                            dst[ox / factor] += v;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Extends the bottom and right edges to `new_h × new_w` by replication.
    pub fn pad_replicate(&mut self, x: Var, new_h: usize, new_w: usize) -> Result<Var> {
        let (c, h, w) = spatial(self.shape(x), "pad_replicate")?;
        if new_h < h || new_w < w {
            return Err(Error::invalid(format!("cannot pad {h}×{w} down to {new_h}×{new_w}")));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0f32; c * new_h * new_w];
        for ch in 0..c {
            for y in 0..new_h {
                let sy = y.min(h - 1);
                for xx in 0..new_w {
                    out[(ch * new_h + y) * new_w + xx] = xv[(ch * h + sy) * w + xx.min(w - 1)];
                }
            }
        }
        let value = DenseTensor::new(&[c, new_h, new_w], out)?;
        self.record(
            "pad_replicate",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut gx = vec![0.0f32; c * h * w];
                for ch in 0..c {
                    for y in 0..new_h {
                        let sy = y.min(h - 1);
                        for xx in 0..new_w {
                            gx[(ch * h + sy) * w + xx.min(w - 1)] += ctx.grad[(ch * new_h + y) * new_w + xx];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Keeps the top-left `h × w` window.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (c, ih, iw) = spatial(self.shape(x), "crop")?;
        if h > ih || w > iw {
            return Err(Error::invalid(format!("cannot crop {ih}×{iw} to {h}×{w}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                out.extend_from_slice(&xv[(ch * ih + y) * iw..][..w]);
            }
        }
        let value = DenseTensor::new(&[c, h, w], out)?;
        self.record(
            "crop",
            &[x],
            value,
            Box::new(move |ctx| {
                let mut gx = vec![0.0f32; c * ih * iw];
                for ch in 0..c {
                    for y in 0..h {
                        gx[(ch * ih + y) * iw..][..w].copy_from_slice(&ctx.grad[(ch * h + y) * w..][..w]);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

/// Flat offsets of every slice (outer) and of every element within a slice
/// (inner) when normalizing over `axes`.
fn slice_offsets(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let offsets = |dims: &[usize]| -> Vec<usize> {
        let mut offs = vec![0usize];
        for &d in dims {
            let mut next = Vec::with_capacity(offs.len() * shape[d]);
            for &o in &offs {
                for i in 0..shape[d] {
                    next.push(o + i * strides[d]);
                }
            }
            offs = next;
        }
        offs
    };
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let mut norm: Vec<usize> = axes.to_vec();
    norm.sort_unstable();
    norm.dedup();
    (offsets(&kept), offsets(&norm))
}

fn depthwise_forward(g: &ConvGeom, x: &[f32], w: &[f32], out: &mut [f32]) {
    let n = g.out_len();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let dst = &mut out[c * n..(c + 1) * n];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let wv = w[(c * g.k + ky) * g.k + kx];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..][..g.w];
                    let drow = &mut dst[oy * g.out_w..][..g.out_w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d += wv * src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    g: &ConvGeom,
    x: &[f32],
    w: &[f32],
    grad: &[f32],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let n = g.out_len();
    let mut gx = need_x.then(|| vec![0.0f32; x.len()]);
    let mut gw = need_w.then(|| vec![0.0f32; w.len()]);
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let gsrc = &grad[c * n..(c + 1) * n];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let widx = (c * g.k + ky) * g.k + kx;
                let wv = w[widx];
                let mut acc = 0.0f64;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let row = iy as usize * g.w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let gv = gsrc[oy * g.out_w + ox];
                        if let Some(gx) = gx.as_mut() {
                            gx[c * g.h * g.w + row + ix as usize] += wv * gv;
                        }
                        acc += (gv * plane[row + ix as usize]) as f64;
                    }
                }
                if let Some(gw) = gw.as_mut() {
                    gw[widx] = acc as f32;
                }
            }
        }
    }
    (gx, gw)
}
