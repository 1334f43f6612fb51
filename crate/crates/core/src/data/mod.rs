//! Synthetic abdominal phantoms and a pixel-domain low-dose noise surrogate.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const AIR_HU: f32 = -1000.0;
pub const HU_MIN: f32 = -1024.0;
pub const HU_MAX: f32 = 3071.0;
/// Window used to feed the networks.
pub const TRAINING_WINDOW: (f32, f32) = (-1000.0, 2000.0);
/// Display window used for metrics and PNG export.
pub const ABDOMINAL_WINDOW: (f32, f32) = (-160.0, 240.0);
pub const MIN_SIZE: usize = 64;
pub const MAX_SIZE: usize = 512;

const MAGIC: &[u8; 4] = b"LMPD";
// Noise draws must not reuse the phantom's stream.
const NOISE_STREAM: u64 = 0x6e6f_6973_65;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Tissue {
    Fat,
    SoftTissue,
    Organ,
    Lesion,
    Bone,
}

/// Filled region of the phantom in normalized coordinates `[−1, 1]²`
/// (x to the right, y down). `arc = (inner, mid, half)` restricts an ellipse
/// to the annulus `[inner·r, r]` within `half` radians of the angle `mid`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub tissue: Tissue,
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub angle: f64,
    pub hu: f32,
    pub arc: Option<(f64, f64, f64)>,
}

impl Shape {
    fn ellipse(tissue: Tissue, cx: f64, cy: f64, rx: f64, ry: f64, angle: f64, hu: f32) -> Self {
        Self {
            tissue,
            cx,
            cy,
            rx,
            ry,
            angle,
            hu,
            arc: None,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let r2 = u * u + v * v;
        match self.arc {
            None => r2 <= 1.0,
            Some((inner, mid, half)) => {
                if r2 > 1.0 || r2 < inner * inner {
                    return false;
                }
                let d = (v.atan2(u) - mid).rem_euclid(std::f64::consts::TAU);
                d.min(std::f64::consts::TAU - d) <= half
            }
        }
    }
}

/// Random layout of one phantom; painting order is list order.
pub fn phantom_anatomy(seed: u64) -> Vec<Shape> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes = Vec::new();
    let bx = rng.gen_range(-0.04..0.04);
    let by = rng.gen_range(-0.04..0.04);
    let rx = rng.gen_range(0.78..0.9);
    let ry = rng.gen_range(0.58..0.72);
    // subcutaneous fat shell around the soft-tissue body
    shapes.push(Shape::ellipse(Tissue::Fat, bx, by, rx, ry, 0.0, rng.gen_range(-110.0..-90.0)));
    let (ix, iy) = (rx * 0.9, ry * 0.88);
    shapes.push(Shape::ellipse(Tissue::SoftTissue, bx, by, ix, iy, 0.0, 40.0));

    let n_ribs = rng.gen_range(3..=5);
    for side in [-1.0f64, 1.0] {
        for k in 0..n_ribs {
            // arcs fanned along each lateral wall
            let centre = if side > 0.0 { 0.0 } else { std::f64::consts::PI };
            let spread = 1.1;
            let t = centre - spread / 2.0 + spread * (k as f64 + 0.5) / n_ribs as f64;
            let half = rng.gen_range(0.06..0.1);
            shapes.push(Shape {
                tissue: Tissue::Bone,
                cx: bx,
                cy: by,
                rx: ix * 0.97,
                ry: iy * 0.97,
                angle: 0.0,
                hu: rng.gen_range(280.0..320.0),
                arc: Some((0.93, t, half)),
            });
        }
    }
    // vertebral body, posterior midline
    let vr = rng.gen_range(0.07..0.1);
    shapes.push(Shape::ellipse(Tissue::Bone, bx, by + iy * 0.72, vr, vr * 0.9, 0.0, rng.gen_range(280.0..320.0)));

    let n_organs = rng.gen_range(2..=6);
    let mut organs = Vec::with_capacity(n_organs);
    for _ in 0..n_organs {
        let r = rng.gen_range(0.0..0.5f64).sqrt();
        let t = rng.gen_range(0.0..std::f64::consts::TAU);
        let o = Shape::ellipse(
            Tissue::Organ,
            bx + r * ix * t.cos() * 0.8,
            by + r * iy * t.sin() * 0.6,
            rng.gen_range(0.12..0.3) * rx,
            rng.gen_range(0.12..0.3) * ry,
            rng.gen_range(0.0..std::f64::consts::PI),
            rng.gen_range(20.0..90.0),
        );
        organs.push(o.clone());
        shapes.push(o);
    }
    for _ in 0..rng.gen_range(1..=3) {
        let host = &organs[rng.gen_range(0..organs.len())];
        let r = rng.gen_range(0.0..0.45);
        let t = rng.gen_range(0.0..std::f64::consts::TAU);
        let (s, c) = host.angle.sin_cos();
        let (u, v) = (r * host.rx * t.cos(), r * host.ry * t.sin());
        let size = rng.gen_range(0.2..0.4) * host.rx.min(host.ry);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        shapes.push(Shape::ellipse(
            Tissue::Lesion,
            host.cx + c * u - s * v,
            host.cy + s * u + c * v,
            size,
            size * rng.gen_range(0.7..1.0),
            rng.gen_range(0.0..std::f64::consts::PI),
            host.hu + sign * rng.gen_range(10.0..15.0),
        ));
    }
    shapes
}

/// Smooth texture: a few low-frequency cosines, a few HU in amplitude.
fn texture(seed: u64) -> Vec<(f64, f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_7874);
    (0..6)
        .map(|_| {
            let f = rng.gen_range(1.0..5.0);
            let t = rng.gen_range(0.0..std::f64::consts::TAU);
            (f * t.cos(), f * t.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.5..1.5))
        })
        .collect()
}

/// Normal-dose phantom in HU, `size×size`. Pixels outside the body are
/// exactly air.
pub fn gen_phantom(seed: u64, size: usize) -> Result<DenseTensor> {
    if !(MIN_SIZE..=MAX_SIZE).contains(&size) {
        return Err(Error::invalid(format!("phantom size {size} outside {MIN_SIZE}..={MAX_SIZE}")));
    }
    let shapes = phantom_anatomy(seed);
    let waves = texture(seed);
    let body = &shapes[0];
    let mut out = vec![AIR_HU; size * size];
    for (i, row) in out.chunks_exact_mut(size).enumerate() {
        let y = (i as f64 + 0.5) / size as f64 * 2.0 - 1.0;
        for (j, px) in row.iter_mut().enumerate() {
            let x = (j as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            if !body.contains(x, y) {
                continue;
            }
            let mut v = body.hu;
            for s in &shapes[1..] {
                if s.contains(x, y) {
                    v = s.hu;
                }
            }
            let tex: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, a)| a * (std::f64::consts::PI * (fx * x + fy * y) + ph).cos())
                .sum();
            *px = (v as f64 + tex).clamp(HU_MIN as f64, HU_MAX as f64) as f32;
        }
    }
    DenseTensor::new(&[size, size], out)
}

/// Parameters of the pixel-domain noise surrogate.
///
/// Per-pixel variance before smoothing is
/// `(quantum_var·exp(scale·(μ − 1)) + electronic_std²) / dose` with
/// `μ = (HU + 1000)/1000` the attenuation relative to water. Both terms grow
/// as the dose drops.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    /// Quantum variance at water, full dose (HU²).
    pub quantum_var: f64,
    pub attenuation_scale: f64,
    /// Electronic noise std at full dose (HU).
    pub electronic_std: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            quantum_var: 1.5,
            attenuation_scale: 3.0,
            electronic_std: 18.0,
        }
    }
}

impl NoiseModel {
    pub fn quantum_only() -> Self {
        Self {
            electronic_std: 0.0,
            ..Self::default()
        }
    }

    pub fn variance(&self, hu: f32, dose: f64) -> f64 {
        let mu = (hu as f64 + 1000.0) / 1000.0;
        (self.quantum_var * (self.attenuation_scale * (mu - 1.0)).exp() + self.electronic_std.powi(2)) / dose
    }
}

/// Reconstruction-like correlation kernel, `[[1,1,1],[1,8,1],[1,1,1]]/16`.
pub const SMOOTHING: [[f32; 3]; 3] = [[1.0, 1.0, 1.0], [1.0, 8.0, 1.0], [1.0, 1.0, 1.0]];

fn smooth3(h: usize, w: usize, src: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0f32;
            for (di, krow) in SMOOTHING.iter().enumerate() {
                let ii = (i + di).saturating_sub(1).min(h - 1);
                for (dj, &k) in krow.iter().enumerate() {
                    let jj = (j + dj).saturating_sub(1).min(w - 1);
                    acc += k * src[ii * w + jj];
                }
            }
            out[i * w + j] = acc / 16.0;
        }
    }
    out
}

/// Seeded low-dose counterpart of `ndct` (`H×W`, HU). The noise field is
/// smoothed before it is added, so the anatomy itself stays sharp and
/// registered.
pub fn simulate_low_dose(ndct: &DenseTensor, dose: f64, seed: u64, noise: &NoiseModel) -> Result<DenseTensor> {
    if !(dose > 0.0 && dose <= 1.0) {
        return Err(Error::invalid(format!("dose fraction {dose} outside (0, 1]")));
    }
    let (h, w) = match *ndct.shape() {
        [h, w] => (h, w),
        _ => return Err(Error::invalid(format!("expected an H×W grid, got {:?}", ndct.shape()))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_STREAM);
    let raw: Vec<f32> = ndct
        .data()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * noise.variance(v, dose).sqrt()) as f32
        })
        .collect();
    let field = smooth3(h, w, &raw);
    let out = ndct
        .data()
        .iter()
        .zip(&field)
        .map(|(&v, &n)| (v + n).clamp(HU_MIN, HU_MAX))
        .collect();
    DenseTensor::new(&[h, w], out)
}

/// Clamp to `[lo, hi]` and map affinely onto `[0, 1]`.
pub fn hu_window(grid: &DenseTensor, lo: f32, hi: f32) -> Result<DenseTensor> {
    if !(lo < hi) {
        return Err(Error::invalid(format!("window [{lo}, {hi}] is empty")));
    }
    let inv = 1.0 / (hi as f64 - lo as f64);
    Ok(DenseTensor::from_fn(grid.shape(), |i| {
        ((grid.data()[i].clamp(lo, hi) as f64 - lo as f64) * inv) as f32
    }))
}

/// Inverse of [`hu_window`] on its range.
pub fn unwindow(x: &DenseTensor, lo: f32, hi: f32) -> DenseTensor {
    DenseTensor::from_fn(x.shape(), |i| lo + x.data()[i] * (hi - lo))
}

/// `H×W` HU grid to the `1×H×W` network input in the training window.
pub fn to_model_input(grid: &DenseTensor) -> Result<DenseTensor> {
    let (lo, hi) = TRAINING_WINDOW;
    let x = hu_window(grid, lo, hi)?;
    let shape = [1, grid.shape()[0], grid.shape()[1]];
    x.reshaped(&shape)
}

/// Network output (`1×H×W` in the training window) back to an `H×W` HU grid.
pub fn from_model_output(x: &DenseTensor) -> Result<DenseTensor> {
    let (lo, hi) = TRAINING_WINDOW;
    let shape = [x.shape()[x.rank() - 2], x.shape()[x.rank() - 1]];
    unwindow(x, lo, hi).reshaped(&shape)
}

/// 8-bit grayscale PNG in the abdominal window.
pub fn save_png(grid: &DenseTensor, path: &Path) -> Result<()> {
    let (h, w) = match *grid.shape() {
        [h, w] | [1, h, w] => (h, w),
        _ => return Err(Error::invalid(format!("cannot export {:?} as an image", grid.shape()))),
    };
    let (lo, hi) = ABDOMINAL_WINDOW;
    let x = hu_window(grid, lo, hi)?;
    let bytes: Vec<u8> = x.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized from the grid");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPair {
    pub ndct: DenseTensor,
    pub ldct: DenseTensor,
    pub seed: u64,
    pub dose: f64,
    pub anatomy: Vec<Shape>,
}

impl PhantomPair {
    pub fn generate(seed: u64, size: usize, dose: f64, noise: &NoiseModel) -> Result<Self> {
        let ndct = gen_phantom(seed, size)?;
        let ldct = simulate_low_dose(&ndct, dose, seed, noise)?;
        Ok(Self {
            ndct,
            ldct,
            seed,
            dose,
            anatomy: phantom_anatomy(seed),
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.ndct.shape()[0], self.ndct.shape()[1])
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let (h, wd) = self.size();
        w.write_all(MAGIC)?;
        binio::write_u32(w, h as u32)?;
        binio::write_u32(w, wd as u32)?;
        binio::write_f32s(w, self.ndct.data())?;
        binio::write_f32s(w, self.ldct.data())?;
        binio::write_f64(w, self.dose)?;
        binio::write_u64(w, self.seed)
    }

    /// The anatomy is not stored; it is rebuilt from the seed.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, MAGIC, "pair file")?;
        let h = binio::read_u32(r)? as usize;
        let w = binio::read_u32(r)? as usize;
        if h == 0 || w == 0 || h > 1 << 14 || w > 1 << 14 {
            return Err(Error::format("pair file", format!("implausible size {h}×{w}")));
        }
        let ndct = DenseTensor::new(&[h, w], binio::read_f32s(r, h * w)?)?;
        let ldct = DenseTensor::new(&[h, w], binio::read_f32s(r, h * w)?)?;
        let dose = binio::read_f64(r)?;
        let seed = binio::read_u64(r)?;
        Ok(Self {
            ndct,
            ldct,
            seed,
            dose,
            anatomy: phantom_anatomy(seed),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Seed of sample `index` in a dataset seeded with `seed` (splitmix64).
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub size: usize,
    pub dose: f64,
    pub noise: NoiseModel,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_count: 512,
            test_count: 64,
            size: 256,
            dose: 0.25,
            noise: NoiseModel::default(),
        }
    }
}

/// In-memory split; the test split uses seeds disjoint from training.
pub fn generate_split(cfg: &DatasetConfig, seed: u64, test: bool) -> Result<Vec<PhantomPair>> {
    let (offset, count) = if test {
        (1u64 << 32, cfg.test_count)
    } else {
        (0, cfg.train_count)
    };
    (0..count as u64)
        .into_par_iter()
        .map(|i| PhantomPair::generate(sample_seed(seed, offset + i), cfg.size, cfg.dose, &cfg.noise))
        .collect()
}

pub fn pair_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("pair_{index:05}.lmpd"))
}

/// Writes `train/` and `test/` under `out`, optionally with PNG previews.
/// Returns the number of files written per split.
pub fn write_dataset(cfg: &DatasetConfig, seed: u64, out: &Path, png: bool) -> Result<(usize, usize)> {
    let mut counts = [0usize; 2];
    for (k, (name, test)) in [("train", false), ("test", true)].into_iter().enumerate() {
        let dir = out.join(name);
        fs::create_dir_all(&dir)?;
        let pairs = generate_split(cfg, seed, test)?;
        for (i, p) in pairs.iter().enumerate() {
            p.save(&pair_path(&dir, i))?;
            if png {
                save_png(&p.ndct, &dir.join(format!("pair_{i:05}_ndct.png")))?;
                save_png(&p.ldct, &dir.join(format!("pair_{i:05}_ldct.png")))?;
            }
        }
        counts[k] = pairs.len();
    }
    Ok((counts[0], counts[1]))
}

/// All pair files of a directory, in file-name order.
pub fn load_dir(dir: &Path) -> Result<Vec<PhantomPair>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lmpd"))
        .collect();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no pair files in {}", dir.display())));
    }
    paths.sort();
    paths.iter().map(|p| PhantomPair::load(p)).collect()
}

#[cfg(test)]
mod tests;
