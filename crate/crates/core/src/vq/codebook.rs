use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LMCB";
const WORDS: &str = include_str!("words.txt");
const SUFFIXES: [&str; 10] = ["s", "ing", "ed", "er", "al", "ic", "ly", "ness", "ous", "ment"];

/// `n` distinct token strings: the bundled words, then suffixed forms, then
/// `##`-prefixed word pieces, then numbered fallbacks.
pub fn default_tokens(n: usize) -> Vec<String> {
    let base: Vec<&str> = WORDS.split_whitespace().collect();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    let candidates = base
        .iter()
        .map(|w| w.to_string())
        .chain(SUFFIXES.iter().flat_map(|s| base.iter().map(move |w| format!("{w}{s}"))))
        .chain(base.iter().map(|w| format!("##{w}")))
        .chain((0..).map(|i| format!("<tok{i}>")));
    for t in candidates {
        if out.len() == n {
            break;
        }
        if seen.insert(t.clone()) {
            out.push(t);
        }
    }
    out
}

/// Frozen token-embedding table. There is deliberately no mutable access to
/// the embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    tokens: Vec<String>,
    dim: usize,
    embeddings: Vec<f32>,
}

impl Codebook {
    pub fn new(tokens: Vec<String>, dim: usize, embeddings: Vec<f32>) -> Result<Self> {
        if tokens.is_empty() || dim == 0 || embeddings.len() != tokens.len() * dim {
            return Err(Error::invalid(format!(
                "codebook needs {}×{dim} embeddings, got {}",
                tokens.len(),
                embeddings.len()
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "codebook" });
        }
        Ok(Self {
            tokens,
            dim,
            embeddings,
        })
    }

    /// Seeded unit-variance Gaussian rows, each scaled to unit length.
    pub fn generate(vocab: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut emb = Vec::with_capacity(vocab * dim);
        for _ in 0..vocab {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            emb.extend(row.iter().map(|v| (v / norm) as f32));
        }
        Self::new(default_tokens(vocab), dim, emb)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn row(&self, id: u32) -> &[f32] {
        let i = id as usize * self.dim;
        &self.embeddings[i..i + self.dim]
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        binio::write_u32(w, self.tokens.len() as u32)?;
        binio::write_u32(w, self.dim as u32)?;
        for t in &self.tokens {
            binio::write_str(w, t)?;
        }
        binio::write_f32s(w, &self.embeddings)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_magic(r, MAGIC, "codebook")?;
        let vocab = binio::read_u32(r)? as usize;
        let dim = binio::read_u32(r)? as usize;
        let mut tokens = Vec::with_capacity(vocab.min(1 << 20));
        for _ in 0..vocab {
            tokens.push(binio::read_str(r, "codebook")?);
        }
        let embeddings = binio::read_f32s(r, vocab * dim)?;
        Self::new(tokens, dim, embeddings).map_err(|e| Error::format("codebook", e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        buf
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

fn sq_dist(z: &[f32], e: &[f32]) -> f64 {
    z.iter()
        .zip(e)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum()
}

/// Id minimizing `‖z − e(t)‖²` over `restrict` (or the whole vocabulary);
/// ties go to the lowest id.
pub fn nearest_token(z: &[f32], cb: &Codebook, restrict: Option<&[u32]>) -> Result<u32> {
    if z.len() != cb.dim() {
        return Err(Error::shape("nearest_token", &[cb.dim()], &[z.len()]));
    }
    let mut best = (f64::INFINITY, u32::MAX);
    let mut consider = |id: u32| {
        let d = sq_dist(z, cb.row(id));
        if d < best.0 || (d == best.0 && id < best.1) {
            best = (d, id);
        }
    };
    match restrict {
        Some(ids) => {
            if ids.is_empty() {
                return Err(Error::invalid("nearest_token over an empty id set"));
            }
            ids.iter().for_each(|&id| consider(id));
        }
        None => (0..cb.len() as u32).for_each(consider),
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::testutil::rng;

    fn tiny() -> Codebook {
        Codebook::new(vec!["a".into(), "b".into()], 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn nearest_examples() {
        let cb = tiny();
        assert_eq!(nearest_token(&[0.1, 0.1], &cb, None).unwrap(), 0);
        assert_eq!(nearest_token(&[0.9, 1.2], &cb, None).unwrap(), 1);
        assert_eq!(nearest_token(&[0.5, 0.5], &cb, None).unwrap(), 0);
        assert_eq!(nearest_token(&[0.1, 0.1], &cb, Some(&[1])).unwrap(), 1);
        assert!(nearest_token(&[0.1, 0.1], &cb, Some(&[])).is_err());
        assert!(nearest_token(&[0.1], &cb, None).is_err());
    }

    #[test]
    fn nearest_matches_brute_force() {
        let cb = Codebook::generate(512, 8, 3).unwrap();
        let mut r = rng(4);
        for _ in 0..100 {
            let z: Vec<f32> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for k in 0..512 {
                let e = &cb.embeddings()[k * 8..(k + 1) * 8];
                let d: f64 = z.iter().zip(e).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            assert_eq!(nearest_token(&z, &cb, None).unwrap() as usize, best);
        }
    }

    #[test]
    fn generated_rows_are_unit_length_and_tokens_distinct() {
        let cb = Codebook::generate(4096, 16, 0).unwrap();
        assert_eq!(cb.len(), 4096);
        for k in 0..4096u32 {
            let n: f32 = cb.row(k).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
        let set: std::collections::HashSet<_> = cb.tokens().iter().collect();
        assert_eq!(set.len(), 4096);
        assert_eq!(cb.token(0), "liver");
        assert_eq!(Codebook::generate(4096, 16, 0).unwrap(), cb);
    }

    #[test]
    fn token_list_extends_past_the_bundled_words() {
        let t = default_tokens(20_000);
        assert_eq!(t.len(), 20_000);
        assert!(t.last().unwrap().starts_with("<tok"));
    }

    #[test]
    fn file_layout() {
        let cb = tiny();
        let bytes = cb.to_bytes();
        assert_eq!(&bytes[..4], b"LMCB");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 12 + (4 + 1) * 2 + 4 * 4);
        assert_eq!(Codebook::read_from(&mut bytes.as_slice()).unwrap(), cb);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Codebook::read_from(&mut bad.as_slice()).is_err());
        assert!(Codebook::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(vocab in 1usize..40, dim in 1usize..9, seed in any::<u64>()) {
            let cb = Codebook::generate(vocab, dim, seed).unwrap();
            let back = Codebook::read_from(&mut cb.to_bytes().as_slice()).unwrap();
            prop_assert_eq!(back, cb);
        }
    }
}
