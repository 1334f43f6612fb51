//! Diagonal state-space models: zero-order-hold discretization, the recurrent
//! and convolutional scans of a time-invariant system, and the input-dependent
//! selective scan used inside the denoiser.

mod selective;

pub use selective::{ScanPlan, SelectiveSsm};

use crate::error::{Error, Result};

/// Below this `|Δa|` the closed-form input gain is replaced by its limit `Δb`.
pub const ZOH_LIMIT: f64 = 1e-6;

/// Continuous-time diagonal system `h' = A h + B x`, `y = C h + D x`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub a: Vec<f32>,
    pub b: Vec<f32>,
    pub c: Vec<f32>,
    pub d: f32,
    pub delta: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: Vec<f32>,
    pub b_bar: Vec<f32>,
    pub c: Vec<f32>,
    pub d: f32,
}

impl DiscreteSsm {
    pub fn state_size(&self) -> usize {
        self.a_bar.len()
    }
}

/// `(Ā, B̄)` for one diagonal element, evaluated in f64.
pub fn zoh_element(a: f64, delta: f64, b: f64) -> (f64, f64) {
    let x = delta * a;
    let a_bar = x.exp();
    let b_bar = if x.abs() < ZOH_LIMIT {
        delta * b
    } else {
        x.exp_m1() / x * delta * b
    };
    (a_bar, b_bar)
}

pub fn zoh_discretize(p: &SsmParams) -> Result<DiscreteSsm> {
    if !(p.delta > 0.0) {
        return Err(Error::invalid(format!("step size must be positive, got {}", p.delta)));
    }
    let n = p.a.len();
    if n == 0 || p.b.len() != n || p.c.len() != n {
        return Err(Error::invalid(format!(
            "state sizes disagree: a {}, b {}, c {}",
            n,
            p.b.len(),
            p.c.len()
        )));
    }
    let (a_bar, b_bar) = p
        .a
        .iter()
        .zip(&p.b)
        .map(|(&a, &b)| {
            let (ab, bb) = zoh_element(a as f64, p.delta as f64, b as f64);
            (ab as f32, bb as f32)
        })
        .unzip();
    Ok(DiscreteSsm {
        a_bar,
        b_bar,
        c: p.c.clone(),
        d: p.d,
    })
}

fn check_sequence(x: &[f32]) -> Result<()> {
    if x.is_empty() {
        Err(Error::invalid("scan over an empty sequence"))
    } else {
        Ok(())
    }
}

/// `h_k = Ā h_{k−1} + B̄ x_k`, `y_k = C h_k + D x_k`, from `h = 0`.
pub fn scan_recurrent(d: &DiscreteSsm, x: &[f32]) -> Result<Vec<f32>> {
    check_sequence(x)?;
    let mut h = vec![0.0f64; d.state_size()];
    let mut y = Vec::with_capacity(x.len());
    for &xk in x {
        let mut acc = d.d as f64 * xk as f64;
        for (n, hn) in h.iter_mut().enumerate() {
            *hn = d.a_bar[n] as f64 * *hn + d.b_bar[n] as f64 * xk as f64;
            acc += d.c[n] as f64 * *hn;
        }
        y.push(acc as f32);
    }
    Ok(y)
}

/// Taps `K̄_k = Σ_n C_n Ā_n^k B̄_n` for `k < len`.
pub fn conv_kernel(d: &DiscreteSsm, len: usize) -> Vec<f32> {
    let mut pow: Vec<f64> = d.b_bar.iter().map(|&b| b as f64).collect();
    (0..len)
        .map(|_| {
            let mut k = 0.0f64;
            for (n, p) in pow.iter_mut().enumerate() {
                k += d.c[n] as f64 * *p;
                *p *= d.a_bar[n] as f64;
            }
            k as f32
        })
        .collect()
}

/// Causal convolution with [`conv_kernel`] plus the `D x` feedthrough.
pub fn scan_conv(d: &DiscreteSsm, x: &[f32]) -> Result<Vec<f32>> {
    check_sequence(x)?;
    let k = conv_kernel(d, x.len());
    Ok((0..x.len())
        .map(|t| {
            let mut acc = d.d as f64 * x[t] as f64;
            for j in 0..=t {
                acc += k[j] as f64 * x[t - j] as f64;
            }
            acc as f32
        })
        .collect())
}

/// Log-spaced negative state rates in `[−1, −0.1]`.
pub fn default_a(n: usize) -> Vec<f32> {
    if n == 1 {
        return vec![-1.0];
    }
    (0..n)
        .map(|i| -(10f64.powf(-(i as f64) / (n - 1) as f64)) as f32)
        .collect()
}
