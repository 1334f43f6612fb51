use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::Hasher;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PyramidLayout;
use crate::tensor::DenseTensor;

/// Tokens kept when no token reaches a layer's threshold.
pub const FALLBACK_TOP_K: usize = 16;

/// Frozen image–token similarity in `[−1, 1]`.
pub trait SimilarityScorer: Send + Sync {
    fn vocab(&self) -> usize;
    /// One score per token for an image normalized to `[0, 1]`.
    fn scores(&self, image: &DenseTensor) -> Vec<f32>;
}

/// Cosine similarity between a square-rooted intensity histogram of the image
/// and a fixed non-negative prototype per token. Both vectors are
/// non-negative, so scores fall in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct HistogramScorer {
    bins: usize,
    lo: f32,
    hi: f32,
    prototypes: Vec<f32>,
}

impl HistogramScorer {
    pub const BINS: usize = 16;
    /// Soft-tissue window on the `[0, 1]` scale of `[−1000, 2000]` HU.
    pub const WINDOW: (f32, f32) = (840.0 / 3000.0, 1240.0 / 3000.0);

    pub fn new(vocab: usize, seed: u64) -> Self {
        let bins = Self::BINS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prototypes = Vec::with_capacity(vocab * bins);
        for _ in 0..vocab {
            let mut p = vec![0.0f64; bins];
            let floor = rng.gen_range(0.0..0.05);
            p.iter_mut().for_each(|v| *v = floor);
            for _ in 0..rng.gen_range(1..=3) {
                let centre = rng.gen_range(-0.5..bins as f64 - 0.5);
                let width = rng.gen_range(0.4..3.0);
                let mass = rng.gen_range(0.2..1.0);
                for (k, v) in p.iter_mut().enumerate() {
                    *v += mass * (-0.5 * ((k as f64 - centre) / width).powi(2)).exp();
                }
            }
            let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            prototypes.extend(p.iter().map(|v| (v / n) as f32));
        }
        Self {
            bins,
            lo: Self::WINDOW.0,
            hi: Self::WINDOW.1,
            prototypes,
        }
    }

    /// Unit-length square-rooted histogram: one bin below the window, one
    /// above, the rest spread evenly across it.
    pub fn descriptor(&self, image: &DenseTensor) -> Vec<f32> {
        let inner = self.bins - 2;
        let mut hist = vec![0.0f64; self.bins];
        for &v in image.data() {
            let k = if v < self.lo {
                0
            } else if v >= self.hi {
                self.bins - 1
            } else {
                1 + (((v - self.lo) / (self.hi - self.lo) * inner as f32) as usize).min(inner - 1)
            };
            hist[k] += 1.0;
        }
        let root: Vec<f64> = hist.iter().map(|h| h.sqrt()).collect();
        let n = root.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        root.iter().map(|v| (v / n) as f32).collect()
    }
}

impl SimilarityScorer for HistogramScorer {
    fn vocab(&self) -> usize {
        self.prototypes.len() / self.bins
    }

    fn scores(&self, image: &DenseTensor) -> Vec<f32> {
        let d = self.descriptor(image);
        self.prototypes
            .chunks_exact(self.bins)
            .map(|p| p.iter().zip(&d).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() as f32)
            .collect()
    }
}

/// Token ids scoring at least `threshold`, ascending; the top
/// [`FALLBACK_TOP_K`] scorers (ties to the lower id) when none qualify.
pub fn build_candidate_pool(scores: &[f32], threshold: f32) -> Vec<u32> {
    let pool: Vec<u32> = (0..scores.len() as u32)
        .filter(|&t| scores[t as usize] >= threshold)
        .collect();
    if !pool.is_empty() {
        return pool;
    }
    let mut ids: Vec<u32> = (0..scores.len() as u32).collect();
    ids.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
    ids.truncate(FALLBACK_TOP_K);
    ids.sort_unstable();
    ids
}

/// Pools for every layer. A fallback pool of a coarser layer is merged into the
/// finer layers so pools stay nested under decreasing thresholds.
pub fn build_pools(scores: &[f32], layout: &PyramidLayout) -> Vec<Vec<u32>> {
    let mut pools: Vec<Vec<u32>> = Vec::with_capacity(layout.depth());
    for l in &layout.layers {
        let mut pool = build_candidate_pool(scores, l.threshold);
        if let Some(prev) = pools.last() {
            if l.threshold <= layout.layers[pools.len() - 1].threshold {
                pool.extend(prev.iter().filter(|&&t| scores[t as usize] < l.threshold));
                pool.sort_unstable();
                pool.dedup();
            }
        }
        pools.push(pool);
    }
    pools
}

pub fn image_hash(image: &DenseTensor) -> u64 {
    let mut h = DefaultHasher::new();
    for &d in image.shape() {
        h.write_usize(d);
    }
    for &v in image.data() {
        h.write_u32(v.to_bits());
    }
    h.finish()
}

/// Per-image candidate pools, computed once and shared.
#[derive(Default)]
pub struct PoolCache {
    map: Mutex<HashMap<u64, Arc<Vec<Vec<u32>>>>>,
}

impl PoolCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_build(
        &self,
        image: &DenseTensor,
        scorer: &dyn SimilarityScorer,
        layout: &PyramidLayout,
    ) -> Arc<Vec<Vec<u32>>> {
        let key = image_hash(image);
        if let Some(p) = self.map.lock().expect("pool cache").get(&key) {
            return Arc::clone(p);
        }
        let pools = Arc::new(build_pools(&scorer.scores(image), layout));
        self.map
            .lock()
            .expect("pool cache")
            .insert(key, Arc::clone(&pools));
        pools
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("pool cache").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::testutil::rng;

    #[test]
    fn full_vocabulary_at_minus_one() {
        let scores: Vec<f32> = (0..50).map(|i| (i as f32 / 25.0) - 1.0).collect();
        assert_eq!(build_candidate_pool(&scores, -1.0).len(), 50);
    }

    #[test]
    fn fallback_keeps_top_sixteen() {
        let mut r = rng(1);
        let scores: Vec<f32> = (0..100).map(|_| r.gen_range(-1.0..0.5)).collect();
        let pool = build_candidate_pool(&scores, 0.9);
        assert_eq!(pool.len(), 16);
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let cutoff = sorted[15];
        assert!(pool.iter().all(|&t| scores[t as usize] >= cutoff));
    }

    #[test]
    fn threshold_pool_matches_filter() {
        let mut r = rng(2);
        let scores: Vec<f32> = (0..300).map(|_| r.gen_range(-1.0..1.0)).collect();
        let want: Vec<u32> = (0..300).filter(|&i| scores[i as usize] >= 0.5).collect();
        assert_eq!(build_candidate_pool(&scores, 0.5), want);
    }

    #[test]
    fn scores_are_bounded_and_deterministic() {
        let s = HistogramScorer::new(256, 7);
        let img = DenseTensor::rand_uniform(&[1, 16, 16], 0.0, 1.0, &mut rng(3));
        let a = s.scores(&img);
        assert_eq!(a, s.scores(&img));
        assert_eq!(a.len(), 256);
        assert!(a.iter().all(|v| (0.0..=1.0 + 1e-6).contains(v)));
        let d = s.descriptor(&img);
        let n: f32 = d.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn cache_reuses_pools() {
        let s = HistogramScorer::new(64, 1);
        let layout = PyramidLayout::default_for(8, 8).unwrap();
        let cache = PoolCache::new();
        let img = DenseTensor::rand_uniform(&[1, 8, 8], 0.0, 1.0, &mut rng(4));
        let a = cache.get_or_build(&img, &s, &layout);
        let b = cache.get_or_build(&img, &s, &layout);
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(cache.len(), 1);
    }

    proptest! {
        #[test]
        fn decreasing_thresholds_nest_pools(seed in any::<u64>()) {
            let s = HistogramScorer::new(512, seed);
            let img = DenseTensor::rand_uniform(&[1, 12, 12], 0.25, 0.45, &mut rng(seed));
            let layout = PyramidLayout::default_for(8, 8).unwrap();
            let pools = build_pools(&s.scores(&img), &layout);
            for w in pools.windows(2) {
                prop_assert!(w[0].iter().all(|t| w[1].contains(t)));
            }
        }
    }
}
