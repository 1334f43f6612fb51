//! Frozen-codebook quantization with a three-layer token pyramid, candidate
//! token pools and the semantic and commitment losses.

mod codebook;
mod layout;
mod quantize;
mod scorer;

pub use codebook::{default_tokens, nearest_token, Codebook};
pub use layout::{PyramidLayer, PyramidLayout};
pub use quantize::{pyramid_quantize, TokenPyramid};
pub use scorer::{
    build_candidate_pool, build_pools, image_hash, HistogramScorer, PoolCache, SimilarityScorer, FALLBACK_TOP_K,
};
