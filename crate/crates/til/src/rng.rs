//! Deterministic random streams.
//!
//! All randomness is derived from the experiment seed plus a short tag
//! path (stream id, then epoch / batch / user indices as needed). Streams
//! with different tags are independent, so adding a consumer to one code
//! path never perturbs the draws seen by another. This is what lets a
//! weighted run and a plain baseline run sample bit-identical training
//! batches while the weighted run additionally draws outer batches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids. The first tag in every path is one of these.
pub mod stream {
    /// Embedding table initialization.
    pub const INIT_EMBEDDINGS: u64 = 1;
    /// Weight network initialization.
    pub const INIT_WEIGHT_NET: u64 = 2;
    /// k-means seeding during cluster (re)initialization.
    pub const KMEANS: u64 = 3;
    /// Inner-loop triplet sampling; tag path is `[SAMPLE_INNER, epoch]`.
    pub const SAMPLE_INNER: u64 = 4;
    /// Outer-loop triplet sampling; tag path is
    /// `[SAMPLE_OUTER, epoch, batch]`.
    pub const SAMPLE_OUTER: u64 = 5;
    /// Per-user train/validation/test splitting; tag path is
    /// `[SPLIT, user]`.
    pub const SPLIT: u64 = 6;
    /// Synthetic noise injection.
    pub const NOISE: u64 = 7;
    /// Synthetic dataset generation.
    pub const SYNTH: u64 = 8;
    /// Case-study triplet subsampling.
    pub const CASE_STUDY: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent RNG from the experiment seed and a tag path.
pub fn stream_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut s = splitmix64(seed);
    for &t in tags {
        s = splitmix64(s ^ t.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    ChaCha8Rng::seed_from_u64(s)
}
