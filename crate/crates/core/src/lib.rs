//! Cross-view transformer for map-view semantic segmentation from multiple
//! calibrated cameras, with a synthetic multi-camera scene generator,
//! training loop, and evaluation harness.

pub mod attention;
pub mod cli;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Mixes `base` and `index` into a well-spread 64-bit seed (SplitMix64).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
