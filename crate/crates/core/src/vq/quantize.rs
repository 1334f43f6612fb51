use super::{nearest_token, Codebook, PyramidLayout};
use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Tape, Var};

/// Result of quantizing one latent map through the pyramid.
#[derive(Clone, Debug)]
pub struct TokenPyramid {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    /// Latent positions per layer, copied from the layout.
    pub positions: Vec<Vec<u32>>,
    /// Token ids per layer, aligned with that layer's positions.
    pub tokens: Vec<Vec<u32>>,
    /// Residual-augmented inputs `z_l`, position-major `|P(l)|×C`.
    pub z_layers: Vec<Vec<f32>>,
    /// `∂z_l/∂z` per layer position: one plus the number of earlier layers
    /// quantizing that position.
    pub multipliers: Vec<Vec<f32>>,
    /// Mean embedding of layers `≤ l` at each covered position, `C×H×W`.
    pub partial: Vec<DenseTensor>,
    /// Whether some layer `≤ l` quantizes the position.
    pub covered: Vec<Vec<bool>>,
    /// Final quantized map (`partial` of the last layer; `z_e` where uncovered).
    pub z_q: DenseTensor,
}

impl TokenPyramid {
    pub fn layer_tokens<'a>(&self, l: usize, cb: &'a Codebook) -> Vec<&'a str> {
        self.tokens[l].iter().map(|&t| cb.token(t)).collect()
    }
}

/// Layer-by-layer residual quantization: `z_l = z + Σ_{i<l, p∈P(i)} (z − e(t_i))`,
/// `t_l = argmin ‖z_l − e(t)‖²`, and `z_q` the mean of the assigned embeddings.
pub fn pyramid_quantize(z_e: &DenseTensor, layout: &PyramidLayout, cb: &Codebook) -> Result<TokenPyramid> {
    let (c, h, w) = match *z_e.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::invalid(format!("latent must be C×H×W, got {:?}", z_e.shape()))),
    };
    if (h, w) != (layout.h, layout.w) || c != cb.dim() {
        return Err(Error::shape("pyramid_quantize", &[cb.dim(), layout.h, layout.w], z_e.shape()));
    }
    let p = h * w;
    let z = z_e.data();
    let at = |pos: usize| -> Vec<f32> { (0..c).map(|k| z[k * p + pos]).collect() };
    let mut resid = vec![0.0f32; p * c];
    let mut prior = vec![0u32; p];
    let mut emb_sum = vec![0.0f64; p * c];
    let mut covered = vec![false; p];
    let mut out = TokenPyramid {
        h,
        w,
        dim: c,
        positions: layout.layers.iter().map(|l| l.positions.clone()).collect(),
        tokens: Vec::new(),
        z_layers: Vec::new(),
        multipliers: Vec::new(),
        partial: Vec::new(),
        covered: Vec::new(),
        z_q: z_e.clone(),
    };
    for layer in &layout.layers {
        let mut toks = Vec::with_capacity(layer.positions.len());
        let mut zl_all = Vec::with_capacity(layer.positions.len() * c);
        let mut mult = Vec::with_capacity(layer.positions.len());
        let mut assigned = Vec::with_capacity(layer.positions.len());
        for &pos in &layer.positions {
            let pos = pos as usize;
            let zp = at(pos);
            let zl: Vec<f32> = (0..c).map(|k| zp[k] + resid[pos * c + k]).collect();
            let t = nearest_token(&zl, cb, None)?;
            toks.push(t);
            zl_all.extend_from_slice(&zl);
            mult.push(1.0 + prior[pos] as f32);
            assigned.push((pos, t));
        }
        // residuals of this layer only feed later layers
        for &(pos, t) in &assigned {
            let e = cb.row(t);
            let zp = at(pos);
            for k in 0..c {
                resid[pos * c + k] += zp[k] - e[k];
                emb_sum[pos * c + k] += e[k] as f64;
            }
            prior[pos] += 1;
            covered[pos] = true;
        }
        let mut part = vec![0.0f32; c * p];
        for pos in 0..p {
            if prior[pos] > 0 {
                for k in 0..c {
                    part[k * p + pos] = (emb_sum[pos * c + k] / prior[pos] as f64) as f32;
                }
            }
        }
        out.tokens.push(toks);
        out.z_layers.push(zl_all);
        out.multipliers.push(mult);
        out.partial.push(DenseTensor::new(&[c, h, w], part)?);
        out.covered.push(covered.clone());
    }
    let last = out.partial.last().expect("non-empty layout").data();
    let mut zq = z.to_vec();
    for pos in 0..p {
        if covered[pos] {
            for k in 0..c {
                zq[k * p + pos] = last[k * p + pos];
            }
        }
    }
    out.z_q = DenseTensor::new(&[c, h, w], zq)?;
    Ok(out)
}

/// Loss value and `∂L/∂z_l` (position-major) of the pyramid semantic loss.
pub(crate) fn semantic_terms(
    pyr: &TokenPyramid,
    pools: &[Vec<u32>],
    cb: &Codebook,
) -> Result<(f64, Vec<Vec<f32>>)> {
    if pools.len() != pyr.tokens.len() {
        return Err(Error::invalid(format!(
            "{} pools for {} pyramid layers",
            pools.len(),
            pyr.tokens.len()
        )));
    }
    let c = pyr.dim;
    let v = cb.len();
    let depth = pyr.tokens.len() as f64;
    let mut loss = 0.0f64;
    let mut grads = Vec::with_capacity(pools.len());
    let mut logits = vec![0.0f64; v];
    for (l, pool) in pools.iter().enumerate() {
        if pool.is_empty() {
            return Err(Error::invalid(format!("empty candidate pool at layer {l}")));
        }
        let mut pool_mean = vec![0.0f64; c];
        let mut pool_sq = 0.0f64;
        for &t in pool {
            let e = cb.row(t);
            for k in 0..c {
                pool_mean[k] += e[k] as f64;
            }
            pool_sq += e.iter().map(|&x| x as f64 * x as f64).sum::<f64>();
        }
        let np = pool.len() as f64;
        pool_mean.iter_mut().for_each(|m| *m /= np);
        pool_sq /= np;

        let n_pos = pyr.tokens[l].len();
        let scale = 1.0 / (depth * n_pos as f64);
        let mut g = vec![0.0f32; n_pos * c];
        for (i, z) in pyr.z_layers[l].chunks_exact(c).enumerate() {
            let mut max = f64::NEG_INFINITY;
            for (t, lg) in logits.iter_mut().enumerate() {
                let e = cb.row(t as u32);
                let d: f64 = z
                    .iter()
                    .zip(e)
                    .map(|(&a, &b)| {
                        let d = a as f64 - b as f64;
                        d * d
                    })
                    .sum();
                *lg = -d;
                max = max.max(*lg);
            }
            let mut denom = 0.0f64;
            let mut expected = vec![0.0f64; c];
            for (t, &lg) in logits.iter().enumerate() {
                let wgt = (lg - max).exp();
                denom += wgt;
                let e = cb.row(t as u32);
                for k in 0..c {
                    expected[k] += wgt * e[k] as f64;
                }
            }
            let lse = max + denom.ln();
            let z_sq: f64 = z.iter().map(|&a| a as f64 * a as f64).sum();
            let z_dot: f64 = z.iter().zip(&pool_mean).map(|(&a, &b)| a as f64 * b).sum();
            // mean over the pool of −logit = mean ‖z − e_c‖²
            let mean_dist = z_sq - 2.0 * z_dot + pool_sq;
            loss += scale * (lse + mean_dist);
            for k in 0..c {
                g[i * c + k] = (scale * 2.0 * (expected[k] / denom - pool_mean[k])) as f32;
            }
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

impl Tape {
    /// Value `z_q`, gradient passed to `z_e` unchanged.
    pub fn straight_through(&mut self, z_e: Var, z_q: &DenseTensor) -> Result<Var> {
        if self.shape(z_e) != z_q.shape() {
            return Err(Error::shape("straight_through", self.shape(z_e), z_q.shape()));
        }
        self.record(
            "straight_through",
            &[z_e],
            z_q.clone(),
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        )
    }

    /// Mean over layers, layer positions and pool candidates of
    /// `−log softmax_k(−‖z_l − e(k)‖²)[c]`; differentiable in `z_e` through
    /// `z_l` with the token choices held fixed.
    pub fn semantic_loss(&mut self, z_e: Var, pyr: &TokenPyramid, pools: &[Vec<u32>], cb: &Codebook) -> Result<Var> {
        if self.shape(z_e) != [pyr.dim, pyr.h, pyr.w] {
            return Err(Error::shape("semantic_loss", &[pyr.dim, pyr.h, pyr.w], self.shape(z_e)));
        }
        let (loss, grads) = semantic_terms(pyr, pools, cb)?;
        let (c, p) = (pyr.dim, pyr.h * pyr.w);
        // scatter ∂L/∂z_l · ∂z_l/∂z into channel-major z_e layout
        let mut gz = vec![0.0f32; c * p];
        for (l, g) in grads.iter().enumerate() {
            for (i, gi) in g.chunks_exact(c).enumerate() {
                let pos = pyr.positions[l][i] as usize;
                let m = pyr.multipliers[l][i];
                for k in 0..c {
                    gz[k * p + pos] += m * gi[k];
                }
            }
        }
        self.record(
            "semantic_loss",
            &[z_e],
            DenseTensor::scalar(loss as f32),
            Box::new(move |ctx| {
                let s = ctx.grad[0];
                vec![Some(gz.iter().map(|v| v * s).collect())]
            }),
        )
    }

    /// `Σ_l ‖z − sg(target_l)‖²` restricted to each mask.
    pub fn commitment_loss(&mut self, z: Var, targets: &[DenseTensor], masks: &[Vec<bool>]) -> Result<Var> {
        let shape = self.shape(z).to_vec();
        if targets.len() != masks.len() {
            return Err(Error::invalid("commitment targets and masks differ in count"));
        }
        let n = self.value(z).numel();
        let c = shape[0];
        let p = n / c;
        let zv = self.value(z).data();
        let mut loss = 0.0f64;
        let mut g = vec![0.0f32; n];
        for (t, m) in targets.iter().zip(masks) {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("commitment_loss", &shape, t.shape()));
            }
            if m.len() != p {
                return Err(Error::shape("commitment_loss", &[p], &[m.len()]));
            }
            for k in 0..c {
                for pos in 0..p {
                    if m[pos] {
                        let i = k * p + pos;
                        let d = zv[i] - t.data()[i];
                        loss += d as f64 * d as f64;
                        g[i] += 2.0 * d;
                    }
                }
            }
        }
        self.record(
            "commitment_loss",
            &[z],
            DenseTensor::scalar(loss as f32),
            Box::new(move |ctx| {
                let s = ctx.grad[0];
                vec![Some(g.iter().map(|v| v * s).collect())]
            }),
        )
    }

    /// Commitment of `z_e` to each layer's running mean `z_≤l`.
    pub fn pyramid_commitment(&mut self, z_e: Var, pyr: &TokenPyramid) -> Result<Var> {
        self.commitment_loss(z_e, &pyr.partial, &pyr.covered)
    }
}
