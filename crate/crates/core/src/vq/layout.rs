use crate::error::{Error, Result};

/// One pyramid layer: the latent positions it quantizes and its pool threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLayer {
    /// Row-major latent positions, in row-major order.
    pub positions: Vec<u32>,
    pub grid: (usize, usize),
    pub threshold: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLayout {
    pub h: usize,
    pub w: usize,
    pub layers: Vec<PyramidLayer>,
}

fn lattice(w: usize, rows: &[usize], cols: &[usize], threshold: f32) -> PyramidLayer {
    let positions = rows
        .iter()
        .flat_map(|&i| cols.iter().map(move |&j| (i * w + j) as u32))
        .collect();
    PyramidLayer {
        positions,
        grid: (rows.len(), cols.len()),
        threshold,
    }
}

fn strided(len: usize, stride: usize, offset: usize) -> Vec<usize> {
    (offset..len).step_by(stride).collect()
}

impl PyramidLayout {
    /// Three dilated layers on an `h×w` latent. On a 32×32 latent: a 2×2
    /// lattice at rows/cols {8, 24}, an 8×8 lattice at indices ≡ 2 (mod 4),
    /// and the full grid.
    pub fn dilated(h: usize, w: usize, thresholds: [f32; 3]) -> Result<Self> {
        if h < 2 || w < 2 {
            return Err(Error::invalid(format!("latent {h}×{w} too small for a pyramid")));
        }
        let l1 = lattice(w, &[h / 4, 3 * h / 4], &[w / 4, 3 * w / 4], thresholds[0]);
        let rows = strided(h, (h / 8).max(1), h / 16);
        let cols = strided(w, (w / 8).max(1), w / 16);
        let l2 = lattice(w, &rows, &cols, thresholds[1]);
        let all_r: Vec<usize> = (0..h).collect();
        let all_c: Vec<usize> = (0..w).collect();
        let l3 = lattice(w, &all_r, &all_c, thresholds[2]);
        Self::new(h, w, vec![l1, l2, l3])
    }

    pub fn default_for(h: usize, w: usize) -> Result<Self> {
        Self::dilated(h, w, [0.95, 0.9, 0.8])
    }

    /// One layer covering every position.
    pub fn single(h: usize, w: usize, threshold: f32) -> Result<Self> {
        let rows: Vec<usize> = (0..h).collect();
        let cols: Vec<usize> = (0..w).collect();
        Self::new(h, w, vec![lattice(w, &rows, &cols, threshold)])
    }

    pub fn new(h: usize, w: usize, layers: Vec<PyramidLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("pyramid without layers"));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.positions.is_empty() || layer.positions.iter().any(|&p| p as usize >= h * w) {
                return Err(Error::invalid(format!("layer {l} has positions outside the {h}×{w} latent")));
            }
            if !(-1.0..=1.0).contains(&layer.threshold) {
                return Err(Error::invalid(format!("layer {l} threshold {} outside [-1, 1]", layer.threshold)));
            }
        }
        Ok(Self { h, w, layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn token_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.positions.len()).collect()
    }

    pub fn thresholds(&self) -> Vec<f32> {
        self.layers.iter().map(|l| l.threshold).collect()
    }

    /// `membership[l][p]` is true when layer `l` quantizes position `p`.
    pub fn membership(&self) -> Vec<Vec<bool>> {
        self.layers
            .iter()
            .map(|l| {
                let mut m = vec![false; self.h * self.w];
                l.positions.iter().for_each(|&p| m[p as usize] = true);
                m
            })
            .collect()
    }
}
