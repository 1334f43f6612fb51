//! PSNR/SSIM and dataset evaluation in a display window.
//!
//! Images are windowed to `[0, 1]` first and compared with data range 1,
//! which is the same PSNR as comparing clamped HU with the window width as
//! the range.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{hu_window, PhantomPair, ABDOMINAL_WINDOW};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(op: &'static str, a: &DenseTensor, b: &DenseTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `10·log10(range²/MSE)`; identical images give `+∞`.
pub fn psnr(a: &DenseTensor, b: &DenseTensor, data_range: f64) -> Result<f64> {
    check_same("psnr", a, b)?;
    if !(data_range > 0.0) {
        return Err(Error::invalid(format!("data range {data_range} must be positive")));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(h: usize, w: usize, x: &[f64], g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| g[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| g[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

fn plane(t: &DenseTensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] => Ok((h, w)),
        _ => Err(Error::invalid(format!("expected a single-channel image, got {:?}", t.shape()))),
    }
}

/// Mean SSIM over all valid 11×11 Gaussian-weighted windows.
pub fn ssim(a: &DenseTensor, b: &DenseTensor, data_range: f64) -> Result<f64> {
    check_same("ssim", a, b)?;
    let (h, w) = plane(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("{h}×{w} image is smaller than the SSIM window")));
    }
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let g = gaussian_window();
    let x: Vec<f64> = a.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let f = |v: &[f64]| filter_valid(h, w, v, &g);
    let mx = f(&x);
    let my = f(&y);
    let sxx = f(&x.iter().map(|v| v * v).collect::<Vec<_>>());
    let syy = f(&y.iter().map(|v| v * v).collect::<Vec<_>>());
    let sxy = f(&x.iter().zip(&y).map(|(p, q)| p * q).collect::<Vec<_>>());
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Anything mapping an LDCT grid (HU) to a denoised grid (HU).
pub trait Denoiser: Sync {
    fn denoise(&self, ldct: &DenseTensor) -> Result<DenseTensor>;
}

/// `ŷ = x`; its report is the quality of the noisy inputs.
pub struct Identity;

impl Denoiser for Identity {
    fn denoise(&self, ldct: &DenseTensor) -> Result<DenseTensor> {
        Ok(ldct.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub index: usize,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub window: (f32, f32),
    pub images: Vec<ImageMetrics>,
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if !m.is_finite() {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v == f64::INFINITY {
        json!("inf")
    } else if v == f64::NEG_INFINITY {
        json!("-inf")
    } else {
        Value::Null
    }
}

impl MetricReport {
    pub fn psnr(&self) -> (f64, f64) {
        mean_std(&self.images.iter().map(|m| m.psnr).collect::<Vec<_>>())
    }

    pub fn ssim(&self) -> (f64, f64) {
        mean_std(&self.images.iter().map(|m| m.ssim).collect::<Vec<_>>())
    }

    /// One JSON object per image, then an aggregate row. The FSIM column is
    /// always null.
    pub fn json_lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .images
            .iter()
            .map(|m| {
                json!({"index": m.index, "seed": m.seed, "psnr": num(m.psnr), "ssim": num(m.ssim), "fsim": null})
                    .to_string()
            })
            .collect();
        let (pm, ps) = self.psnr();
        let (sm, ss) = self.ssim();
        out.push(
            json!({
                "aggregate": true,
                "count": self.images.len(),
                "window": [self.window.0, self.window.1],
                "psnr_mean": num(pm),
                "psnr_std": num(ps),
                "ssim_mean": num(sm),
                "ssim_std": num(ss),
                "fsim": null,
            })
            .to_string(),
        );
        out
    }

    pub fn write_json_lines<W: Write>(&self, w: &mut W) -> Result<()> {
        for line in self.json_lines() {
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let (pm, ps) = self.psnr();
        let (sm, ss) = self.ssim();
        format!("PSNR {pm:.2}±{ps:.2} dB, SSIM {sm:.4}±{ss:.4} over {} images", self.images.len())
    }
}

/// Parses a JSON number or the `"inf"`/`"-inf"` strings written by the report.
pub fn parse_metric(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) if s == "inf" => Some(f64::INFINITY),
        Value::String(s) if s == "-inf" => Some(f64::NEG_INFINITY),
        _ => None,
    }
}

/// Metrics of one prediction against its reference, both in HU.
pub fn image_metrics(pred: &DenseTensor, target: &DenseTensor, window: (f32, f32)) -> Result<(f64, f64)> {
    let p = hu_window(pred, window.0, window.1)?;
    let t = hu_window(target, window.0, window.1)?;
    Ok((psnr(&p, &t, 1.0)?, ssim(&p, &t, 1.0)?))
}

/// Denoises every pair's LDCT and scores it against the NDCT.
pub fn evaluate(model: &dyn Denoiser, pairs: &[PhantomPair], window: (f32, f32)) -> Result<MetricReport> {
    let images = pairs
        .par_iter()
        .enumerate()
        .map(|(index, p)| {
            let pred = model.denoise(&p.ldct)?;
            let (psnr, ssim) = image_metrics(&pred, &p.ndct, window)?;
            Ok(ImageMetrics {
                index,
                seed: p.seed,
                psnr,
                ssim,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { window, images })
}

pub fn evaluate_abdominal(model: &dyn Denoiser, pairs: &[PhantomPair]) -> Result<MetricReport> {
    evaluate(model, pairs, ABDOMINAL_WINDOW)
}
