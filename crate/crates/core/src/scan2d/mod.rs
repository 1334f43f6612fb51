//! Four-direction scans over 2D feature maps.
//!
//! A map is never physically reordered: each direction (and each skip
//! sub-grid) is expressed as a [`ScanPlan`] over row-major positions, which the
//! selective scan consumes directly.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::nn::{Init, ParamStore};
use crate::ssm::{ScanPlan, SelectiveSsm};
use crate::tensor::{DenseTensor, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    /// Row-major from the top-left corner.
    RowForward,
    /// Row-major from the bottom-right corner.
    RowReverse,
    /// Column-major from the top-left corner.
    ColForward,
    /// Column-major from the bottom-right corner.
    ColReverse,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::RowForward,
        ScanDirection::RowReverse,
        ScanDirection::ColForward,
        ScanDirection::ColReverse,
    ];

    /// The direction that visits the transposed grid in the same order.
    pub fn transposed(self) -> Self {
        match self {
            Self::RowForward => Self::ColForward,
            Self::RowReverse => Self::ColReverse,
            Self::ColForward => Self::RowForward,
            Self::ColReverse => Self::RowReverse,
        }
    }
}

/// Row-major position ids in visiting order.
pub fn direction_order(h: usize, w: usize, dir: ScanDirection) -> Vec<u32> {
    let row_major = || 0..(h * w) as u32;
    let col_major = || (0..w).flat_map(move |j| (0..h).map(move |i| (i * w + j) as u32));
    match dir {
        ScanDirection::RowForward => row_major().collect(),
        ScanDirection::RowReverse => row_major().rev().collect(),
        ScanDirection::ColForward => col_major().collect(),
        ScanDirection::ColReverse => {
            let mut v: Vec<u32> = col_major().collect();
            v.reverse();
            v
        }
    }
}

fn check_map(x: &DenseTensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::invalid(format!("expected a C×H×W map, got {:?}", x.shape()))),
    }
}

/// `[C, H, W]` → `[C, H·W]` in the direction's visiting order.
pub fn flatten_direction(x: &DenseTensor, dir: ScanDirection) -> Result<DenseTensor> {
    let (c, h, w) = check_map(x)?;
    let order = direction_order(h, w, dir);
    let p = h * w;
    let mut out = Vec::with_capacity(c * p);
    for ch in 0..c {
        let plane = &x.data()[ch * p..(ch + 1) * p];
        out.extend(order.iter().map(|&q| plane[q as usize]));
    }
    DenseTensor::new(&[c, p], out)
}

/// Inverse of [`flatten_direction`].
pub fn unflatten_direction(seq: &DenseTensor, h: usize, w: usize, dir: ScanDirection) -> Result<DenseTensor> {
    let p = h * w;
    let c = match *seq.shape() {
        [c, len] if len == p => c,
        _ => return Err(Error::shape("unflatten", &[seq.shape()[0], p], seq.shape())),
    };
    let order = direction_order(h, w, dir);
    let mut out = vec![0.0; c * p];
    for ch in 0..c {
        let src = &seq.data()[ch * p..(ch + 1) * p];
        let dst = &mut out[ch * p..(ch + 1) * p];
        for (k, &q) in order.iter().enumerate() {
            dst[q as usize] = src[k];
        }
    }
    DenseTensor::new(&[c, h, w], out)
}

/// The `s²` interleaved sub-grids `{(i, j) : i mod s = r, j mod s = c}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubGridPartition {
    pub h: usize,
    pub w: usize,
    pub step: usize,
}

impl SubGridPartition {
    pub fn new(h: usize, w: usize, step: usize) -> Result<Self> {
        if step == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!("invalid partition {h}×{w} with step {step}")));
        }
        Ok(Self { h, w, step })
    }

    pub fn count(&self) -> usize {
        self.step * self.step
    }

    /// Extent of sub-grid `(r, c)`.
    pub fn dims(&self, r: usize, c: usize) -> (usize, usize) {
        ((self.h - r).div_ceil(self.step), (self.w - c).div_ceil(self.step))
    }

    /// Row-major positions of sub-grid `(r, c)` within the full grid.
    pub fn cells(&self, r: usize, c: usize) -> Vec<u32> {
        let mut out = Vec::new();
        for i in (r..self.h).step_by(self.step) {
            for j in (c..self.w).step_by(self.step) {
                out.push((i * self.w + j) as u32);
            }
        }
        out
    }
}

/// Plan scanning every sub-grid of `step` independently in direction `dir`.
pub fn build_plan(h: usize, w: usize, dir: ScanDirection, step: usize) -> Result<ScanPlan> {
    let part = SubGridPartition::new(h, w, step)?;
    let mut seqs = Vec::with_capacity(part.count());
    for r in 0..step.min(h) {
        for c in 0..step.min(w) {
            let (sh, sw) = part.dims(r, c);
            let cells = part.cells(r, c);
            seqs.push(direction_order(sh, sw, dir).iter().map(|&k| cells[k as usize]).collect());
        }
    }
    ScanPlan::new(h * w, &seqs)
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, usize, ScanDirection, usize), Arc<ScanPlan>>> =
        RefCell::new(HashMap::new());
    static COUNTERS: Cell<ScanCounters> = const { Cell::new(ScanCounters::new()) };
}

fn cached_plan(h: usize, w: usize, dir: ScanDirection, step: usize) -> Result<Arc<ScanPlan>> {
    let key = (h, w, dir, step);
    if let Some(p) = PLANS.with(|m| m.borrow().get(&key).cloned()) {
        return Ok(p);
    }
    let plan = Arc::new(build_plan(h, w, dir, step)?);
    PLANS.with(|m| m.borrow_mut().insert(key, Arc::clone(&plan)));
    Ok(plan)
}

/// Per-thread scan instrumentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScanCounters {
    /// Directional scans launched.
    pub scans: usize,
    /// Independent sequences scanned.
    pub sequences: usize,
    pub max_seq_len: usize,
    /// Recurrence steps summed over all sequences.
    pub steps: usize,
}

impl ScanCounters {
    const fn new() -> Self {
        Self {
            scans: 0,
            sequences: 0,
            max_seq_len: 0,
            steps: 0,
        }
    }
}

pub fn reset_counters() {
    COUNTERS.with(|c| c.set(ScanCounters::new()));
}

pub fn counters() -> ScanCounters {
    COUNTERS.with(Cell::get)
}

fn record_plan(plan: &ScanPlan) {
    COUNTERS.with(|c| {
        let mut v = c.get();
        v.scans += 1;
        v.sequences += plan.num_sequences();
        v.max_seq_len = v.max_seq_len.max(plan.max_len());
        v.steps += plan.steps();
        c.set(v);
    });
}

/// Sequence length and work of one skip-scanned map of `n = h·w` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenCounts {
    pub seq_len: usize,
    pub sequences_per_direction: usize,
    pub steps: usize,
}

/// Counts for an `h×w` map; non-divisible extents are counted after padding.
pub fn token_accounting(h: usize, w: usize, step: usize) -> Result<TokenCounts> {
    SubGridPartition::new(h, w, step)?;
    let (ph, pw) = (h.next_multiple_of(step), w.next_multiple_of(step));
    let seq_len = (ph / step) * (pw / step);
    Ok(TokenCounts {
        seq_len,
        sequences_per_direction: step * step,
        steps: 4 * ph * pw,
    })
}

/// Four independently parameterized selective scans whose outputs are summed.
#[derive(Clone, Debug)]
pub struct Ss2d {
    pub directions: [ScanDirection; 4],
    ssms: Vec<SelectiveSsm>,
}

impl Ss2d {
    pub fn new(init: &mut Init<'_>, name: &str, channels: usize, state: usize) -> Self {
        let mut s = init.scoped(name);
        let ssms = (0..4)
            .map(|k| SelectiveSsm::new(&mut s, &format!("dir{k}"), channels, state))
            .collect();
        Self {
            directions: ScanDirection::ALL,
            ssms,
        }
    }

    /// Full-resolution scan in all four directions.
    pub fn ss2d(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.es2d(tape, store, x, 1)
    }

    /// Skip scan: every direction runs over the `step²` sub-grids separately,
    /// sharing that direction's parameters. Extents that are not multiples of
    /// `step` are replicate-padded and the result cropped back.
    pub fn es2d(&self, tape: &mut Tape, store: &ParamStore, x: Var, step: usize) -> Result<Var> {
        let (h, w) = match *tape.shape(x) {
            [_, h, w] => (h, w),
            _ => return Err(Error::invalid(format!("expected a C×H×W map, got {:?}", tape.shape(x)))),
        };
        if step == 0 {
            return Err(Error::invalid("scan step must be at least 1"));
        }
        let (ph, pw) = (h.next_multiple_of(step), w.next_multiple_of(step));
        let xp = if (ph, pw) != (h, w) { tape.pad_replicate(x, ph, pw)? } else { x };
        let mut total: Option<Var> = None;
        for (ssm, &dir) in self.ssms.iter().zip(&self.directions) {
            let plan = cached_plan(ph, pw, dir, step)?;
            record_plan(&plan);
            let y = ssm.forward(tape, store, xp, &plan)?;
            total = Some(match total {
                Some(t) => tape.add(t, y)?,
                None => y,
            });
        }
        let y = total.expect("four directions");
        if (ph, pw) != (h, w) {
            tape.crop(y, h, w)
        } else {
            Ok(y)
        }
    }
}

/// One row of the `bench-scan` CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub step: usize,
    pub direction_count: usize,
    pub seq_len: usize,
    pub wall_ns: u128,
    pub steps: usize,
}

impl BenchRow {
    pub const HEADER: &'static str = "N,s,direction_count,seq_len,wall_ns,steps";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.n, self.step, self.direction_count, self.seq_len, self.wall_ns, self.steps
        )
    }
}

/// Times the forward skip scan on square maps of `n` tokens (`n` must be a
/// perfect square), keeping the fastest of `reps` runs.
pub fn bench_scan(ns: &[usize], step: usize, channels: usize, state: usize, reps: usize, seed: u64) -> Result<Vec<BenchRow>> {
    use rand::SeedableRng;
    let mut store = ParamStore::new();
    let mut rng = crate::nn::init_rng(seed);
    let layer = Ss2d::new(&mut Init::new(&mut store, &mut rng, ""), "bench", channels, state);
    store.freeze_all();
    let mut data_rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut rows = Vec::new();
    for &n in ns {
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return Err(Error::invalid(format!("bench size {n} is not a perfect square")));
        }
        let x = DenseTensor::randn(&[channels, side, side], 1.0, &mut data_rng);
        let mut best = u128::MAX;
        let mut seen = ScanCounters::default();
        for _ in 0..reps.max(1) {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            reset_counters();
            let start = Instant::now();
            layer.es2d(&mut tape, &store, xv, step)?;
            best = best.min(start.elapsed().as_nanos());
            seen = counters();
        }
        rows.push(BenchRow {
            n,
            step,
            direction_count: seen.scans,
            seq_len: seen.max_seq_len,
            wall_ns: best,
            steps: seen.steps,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `ln(wall_ns)` against `ln(N)`.
pub fn log_log_slope(rows: &[BenchRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.n as f64).ln(), (r.wall_ns.max(1) as f64).ln()))
        .collect();
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / m, sy / m);
    let num: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    num / den
}

#[cfg(test)]
mod tests;
