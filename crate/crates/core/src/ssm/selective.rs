use std::sync::Arc;

use rand::Rng;

use super::{default_a, ZOH_LIMIT};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, ParamId, ParamStore};
use crate::tensor::{DenseTensor, Tape, Var};

/// A set of independent scan sequences over `positions` grid cells. Every
/// position belongs to exactly one sequence; each sequence starts from `h = 0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanPlan {
    positions: usize,
    order: Vec<u32>,
    offsets: Vec<usize>,
}

impl ScanPlan {
    pub fn new(positions: usize, sequences: &[Vec<u32>]) -> Result<Self> {
        let mut seen = vec![false; positions];
        let mut order = Vec::with_capacity(positions);
        let mut offsets = vec![0];
        for seq in sequences {
            if seq.is_empty() {
                return Err(Error::invalid("scan plan with an empty sequence"));
            }
            for &p in seq {
                let p = p as usize;
                if p >= positions || seen[p] {
                    return Err(Error::invalid(format!("scan plan visits position {p} twice or out of range")));
                }
                seen[p] = true;
            }
            order.extend_from_slice(seq);
            offsets.push(order.len());
        }
        if order.len() != positions {
            return Err(Error::invalid(format!(
                "scan plan covers {} of {positions} positions",
                order.len()
            )));
        }
        Ok(Self {
            positions,
            order,
            offsets,
        })
    }

    /// One sequence visiting positions `0..len` in order.
    pub fn linear(len: usize) -> Self {
        Self {
            positions: len,
            order: (0..len as u32).collect(),
            offsets: vec![0, len],
        }
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn num_sequences(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.order[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn sequences(&self) -> impl Iterator<Item = &[u32]> {
        (0..self.num_sequences()).map(|i| self.sequence(i))
    }

    pub fn max_len(&self) -> usize {
        self.sequences().map(<[u32]>::len).max().unwrap_or(0)
    }

    /// Total recurrence steps, equal to the number of positions.
    pub fn steps(&self) -> usize {
        self.order.len()
    }
}

fn to_position_major(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    crate::tensor::kernels::transpose(rows, cols, x)
}

const LN2_HI: f32 = 0.693_145_75;
const LN2_LO: f32 = 1.428_606_8e-6;

/// `Σ_{j≥1} x^j/j!` through degree 8; relative error below 1e-9 for
/// `|x| ≤ ln2/2`.
#[inline]
fn expm1_series(x: f32) -> f32 {
    let p = 1.0 / 40320.0;
    let p = p * x + 1.0 / 5040.0;
    let p = p * x + 1.0 / 720.0;
    let p = p * x + 1.0 / 120.0;
    let p = p * x + 1.0 / 24.0;
    let p = p * x + 1.0 / 6.0;
    let p = p * x + 0.5;
    let p = p * x + 1.0;
    p * x
}

/// `exp(x) − 1` for the scan kernel. Small arguments, the common case for
/// state decays, take the series directly; others use range reduction
/// `x = k·ln2 + r`. Accurate to a few ulp and much cheaper than the libm call.
#[inline]
pub(super) fn expm1_fast(x: f32) -> f32 {
    if x.abs() <= 0.346_573_6 {
        return expm1_series(x);
    }
    let x = x.clamp(-87.0, 88.0);
    // round to nearest by the 1.5·2²³ trick; `round` is a libm call on baseline x86-64
    const SHIFT: f32 = 12_582_912.0;
    let k = (x * std::f32::consts::LOG2_E + SHIFT) - SHIFT;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let scale = f32::from_bits(((k as i32 + 127) as u32) << 23);
    expm1_series(r) * scale + (scale - 1.0)
}

impl Tape {
    /// Selective scan with per-position zero-order hold.
    ///
    /// Shapes: `u`, `delta` are `[D, …]` over `P` positions, `b`, `c` are
    /// `[N, …]`, `a` is `[D, N]` and `d` is `[D]`. For every sequence of
    /// `plan` and every channel, `h ← exp(Δa) h + (exp(Δa) − 1)/a · b u` and
    /// `y = c·h + d u`. `delta` must already be positive.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        b: Var,
        c: Var,
        a: Var,
        d: Var,
        plan: &Arc<ScanPlan>,
    ) -> Result<Var> {
        let out_shape = self.shape(u).to_vec();
        let ch = out_shape[0];
        let p = self.value(u).numel() / ch;
        let n = self.shape(a).get(1).copied().unwrap_or(0);
        if self.shape(delta) != out_shape.as_slice() {
            return Err(Error::shape("selective_scan", &out_shape, self.shape(delta)));
        }
        if self.shape(a) != [ch, n] || n == 0 {
            return Err(Error::shape("selective_scan", &[ch, n], self.shape(a)));
        }
        for v in [b, c] {
            if self.value(v).numel() != n * p || self.shape(v)[0] != n {
                return Err(Error::shape("selective_scan", &[n, p], self.shape(v)));
            }
        }
        if self.value(d).numel() != ch {
            return Err(Error::shape("selective_scan", &[ch], self.shape(d)));
        }
        if plan.positions() != p {
            return Err(Error::invalid(format!(
                "scan plan covers {} positions, input has {p}",
                plan.positions()
            )));
        }
        if self.value(delta).data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::invalid("selective scan needs positive step sizes"));
        }

        let av = self.value(a).data().to_vec();
        let mut k = ScanKernel {
            ch,
            n,
            p,
            ut: to_position_major(self.value(u).data(), ch, p),
            dt: to_position_major(self.value(delta).data(), ch, p),
            bt: to_position_major(self.value(b).data(), n, p),
            ct: to_position_major(self.value(c).data(), n, p),
            inv_a: av.iter().map(|&v| 1.0 / v).collect(),
            av,
            dv: self.value(d).data().to_vec(),
            es: Vec::new(),
            gs: Vec::new(),
            hs: Vec::new(),
        };
        let keep = [u, delta, b, c, a, d].iter().any(|&v| self.requires_grad(v));
        let yt = with_simd(|| k.forward(plan, keep));
        let value = DenseTensor::new(&out_shape, to_position_major(&yt, p, ch))?;
        let plan = Arc::clone(plan);
        self.record(
            "selective_scan",
            &[u, delta, b, c, a, d],
            value,
            Box::new(move |ctx| {
                let gyt = to_position_major(ctx.grad, ch, p);
                let g = with_simd(|| k.backward(&plan, &gyt));
                vec![
                    ctx.needs(0).then(|| to_position_major(&g.u, p, ch)),
                    ctx.needs(1).then(|| to_position_major(&g.delta, p, ch)),
                    ctx.needs(2).then(|| to_position_major(&g.b, p, n)),
                    ctx.needs(3).then(|| to_position_major(&g.c, p, n)),
                    ctx.needs(4).then(|| g.a.iter().map(|&v| v as f32).collect()),
                    ctx.needs(5).then(|| g.d.iter().map(|&v| v as f32).collect()),
                ]
            }),
        )
    }
}

/// Runs `f` from a function compiled with AVX2 enabled when the CPU has it.
/// The kernels are `inline(always)`, so they are generated for 256-bit lanes
/// there; no FMA contraction happens, so results match the baseline build.
#[inline(always)]
fn with_simd<R>(f: impl FnOnce() -> R) -> R {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        #[target_feature(enable = "avx2")]
        unsafe fn run<R>(f: impl FnOnce() -> R) -> R {
            f()
        }
        // SAFETY: AVX2 support was checked just above.
        return unsafe { run(f) };
    }
    f()
}

/// Position-major scan inputs plus the forward values the backward pass reuses.
struct ScanKernel {
    ch: usize,
    n: usize,
    p: usize,
    ut: Vec<f32>,
    dt: Vec<f32>,
    bt: Vec<f32>,
    ct: Vec<f32>,
    av: Vec<f32>,
    inv_a: Vec<f32>,
    dv: Vec<f32>,
    /// `exp(Δa)` per position and state element.
    es: Vec<f32>,
    /// `(exp(Δa) − 1)/a` per position and state element.
    gs: Vec<f32>,
    /// State after each position.
    hs: Vec<f32>,
}

struct ScanGrads {
    u: Vec<f32>,
    delta: Vec<f32>,
    b: Vec<f32>,
    c: Vec<f32>,
    a: Vec<f64>,
    d: Vec<f64>,
}

impl ScanKernel {
    /// Discretizes position `pos` into `es`, `gs` (length `D·N`).
    #[inline(always)]
    fn discretize(&self, pos: usize, es: &mut [f32], gs: &mut [f32]) {
        let (ch, n) = (self.ch, self.n);
        let limit = ZOH_LIMIT as f32;
        for dd in 0..ch {
            let dl = self.dt[pos * ch + dd];
            let r = dd * n..(dd + 1) * n;
            for (((&a, &ia), e), g) in self.av[r.clone()].iter().zip(&self.inv_a[r.clone()]).zip(&mut es[r.clone()]).zip(&mut gs[r]) {
                let ad = dl * a;
                let em1 = expm1_fast(ad);
                *e = em1 + 1.0;
                *g = if ad.abs() < limit { dl } else { em1 * ia };
            }
        }
    }

    /// With `keep = false` nothing is cached for a backward pass, which keeps
    /// the working set at one position.
    #[inline(always)]
    fn forward(&mut self, plan: &ScanPlan, keep: bool) -> Vec<f32> {
        let (ch, n, p) = (self.ch, self.n, self.p);
        let dn = ch * n;
        let cached = if keep { p * dn } else { dn };
        let mut es = vec![0.0f32; cached];
        let mut gs = vec![0.0f32; cached];
        let mut hs = vec![0.0f32; if keep { p * dn } else { 0 }];
        let mut yt = vec![0.0f32; p * ch];
        let mut h = vec![0.0f32; dn];
        for seq in plan.sequences() {
            h.iter_mut().for_each(|v| *v = 0.0);
            for &pos in seq {
                let pos = pos as usize;
                let (bp, cp) = (&self.bt[pos * n..(pos + 1) * n], &self.ct[pos * n..(pos + 1) * n]);
                let o = if keep { pos * dn } else { 0 };
                let (es, gs) = (&mut es[o..o + dn], &mut gs[o..o + dn]);
                self.discretize(pos, es, gs);
                for (dd, ((hrow, erow), grow)) in h.chunks_exact_mut(n).zip(es.chunks_exact(n)).zip(gs.chunks_exact(n)).enumerate() {
                    let x = self.ut[pos * ch + dd];
                    let mut acc = 0.0f32;
                    for (((hk, &e), &g), (&bk, &ck)) in hrow.iter_mut().zip(erow).zip(grow).zip(bp.iter().zip(cp)) {
                        *hk = e * *hk + g * bk * x;
                        acc += ck * *hk;
                    }
                    yt[pos * ch + dd] = acc + self.dv[dd] * x;
                }
                if keep {
                    hs[o..o + dn].copy_from_slice(&h);
                }
            }
        }
        if keep {
            (self.es, self.gs, self.hs) = (es, gs, hs);
        }
        yt
    }

    #[inline(always)]
    fn backward(&self, plan: &ScanPlan, gyt: &[f32]) -> ScanGrads {
        let (ch, n, p) = (self.ch, self.n, self.p);
        let dn = ch * n;
        let mut g = ScanGrads {
            u: vec![0.0; p * ch],
            delta: vec![0.0; p * ch],
            b: vec![0.0; p * n],
            c: vec![0.0; p * n],
            a: vec![0.0; dn],
            d: vec![0.0; ch],
        };
        let mut carry = vec![0.0f32; dn];
        // per-sequence f32 partial sums of ∂/∂a, flushed into f64
        let mut ga = vec![0.0f32; dn];
        let zeros = vec![0.0f32; dn];
        for seq in plan.sequences() {
            carry.iter_mut().for_each(|v| *v = 0.0);
            ga.iter_mut().for_each(|v| *v = 0.0);
            for (t, &pos) in seq.iter().enumerate().rev() {
                let pos = pos as usize;
                let o = pos * dn;
                let hcur = &self.hs[o..o + dn];
                let hprev = match t {
                    0 => &zeros[..],
                    _ => {
                        let q = seq[t - 1] as usize * dn;
                        &self.hs[q..q + dn]
                    }
                };
                let (es, gs) = (&self.es[o..o + dn], &self.gs[o..o + dn]);
                let (bp, cp) = (&self.bt[pos * n..(pos + 1) * n], &self.ct[pos * n..(pos + 1) * n]);
                let (gb, gc) = (&mut g.b[pos * n..(pos + 1) * n], &mut g.c[pos * n..(pos + 1) * n]);
                for dd in 0..ch {
                    let i = pos * ch + dd;
                    let (gy, x, dl) = (gyt[i], self.ut[i], self.dt[i]);
                    g.d[dd] += gy as f64 * x as f64;
                    let r = dd * n..(dd + 1) * n;
                    let mut gx = self.dv[dd] * gy;
                    let mut gdl = 0.0f32;
                    let rows = carry[r.clone()]
                        .iter_mut()
                        .zip(&mut ga[r.clone()])
                        .zip(hcur[r.clone()].iter().zip(&hprev[r.clone()]))
                        .zip(es[r.clone()].iter().zip(&gs[r.clone()]))
                        .zip(self.av[r.clone()].iter().zip(&self.inv_a[r]))
                        .zip(bp.iter().zip(cp))
                        .zip(gb.iter_mut().zip(gc.iter_mut()));
                    for ((((((cr, gak), (&hc, &hp)), (&e, &gain)), (&a, &ia)), (&bk, &ck)), (gbk, gck)) in rows {
                        *gck += gy * hc;
                        let q = *cr + ck * gy;
                        let ge = q * hp;
                        let gbar = q * x;
                        gx += q * gain * bk;
                        *gbk += gbar * gain;
                        let ggain = gbar * bk;
                        gdl += ge * a * e + ggain * e;
                        // ∂gain/∂a, by series where the closed form cancels
                        let z = a * dl;
                        let series = dl * dl * (0.5 + z * (1.0 / 3.0 + z * (0.125 + z / 30.0)));
                        let closed = (dl * e - gain) * ia;
                        let dgain = if z.abs() < 0.05 { series } else { closed };
                        *gak += ge * dl * e + ggain * dgain;
                        *cr = q * e;
                    }
                    g.u[i] = gx;
                    g.delta[i] = gdl;
                }
            }
            for (acc, &v) in g.a.iter_mut().zip(&ga) {
                *acc += v as f64;
            }
        }
        g
    }
}

/// Input-dependent SSM over a `D×H×W` map: per-position projections give
/// `Δ = softplus(W_Δ u + b_Δ)`, `B = W_B u`, `C = W_C u`; the state rates
/// `A = −exp(A_log)` and the feedthrough `D` are learned per channel.
#[derive(Clone, Debug)]
pub struct SelectiveSsm {
    pub channels: usize,
    pub state: usize,
    dt_proj: Linear,
    b_proj: Linear,
    c_proj: Linear,
    a_log: ParamId,
    d: ParamId,
}

impl SelectiveSsm {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize, state: usize) -> Self {
        let mut s = init.scoped(name);
        let dt_proj = Linear::with_gain(&mut s, "dt", channels, channels, 0.1);
        // Δ starts log-uniform in [1e-3, 1e-1]; store the inverse softplus as bias
        let bias: Vec<f32> = (0..channels)
            .map(|_| {
                let dt0 = 10f32.powf(s.rng().gen_range(-3.0..-1.0));
                dt0 + (-(-dt0).exp_m1()).ln()
            })
            .collect();
        if let Some(b) = dt_proj.0.bias {
            *s.store_mut().get_mut(b) = DenseTensor::new(&[channels], bias).expect("bias shape");
        }
        let b_proj = Linear::new(&mut s, "b", channels, state);
        let c_proj = Linear::new(&mut s, "c", channels, state);
        let a: Vec<f32> = default_a(state);
        let a_log = DenseTensor::from_fn(&[channels, state], |i| (-a[i % state]).ln());
        let a_log = s.tensor("a_log", a_log);
        let d = s.full("d", &[channels], 1.0);
        Self {
            channels,
            state,
            dt_proj,
            b_proj,
            c_proj,
            a_log,
            d,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, u: Var, plan: &Arc<ScanPlan>) -> Result<Var> {
        let raw = self.dt_proj.forward(tape, store, u)?;
        let delta = tape.softplus(raw)?;
        let b = self.b_proj.forward(tape, store, u)?;
        let c = self.c_proj.forward(tape, store, u)?;
        let a_log = store.bind(tape, self.a_log);
        let a = tape.exp(a_log)?;
        let a = tape.neg(a)?;
        let d = store.bind(tape, self.d);
        tape.selective_scan(u, delta, b, c, a, d, plan)
    }
}
