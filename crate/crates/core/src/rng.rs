//! Deterministic seed derivation.
//!
//! Every randomized component takes a single 64-bit seed and derives an
//! independent sub-seed per consumer stream, so reruns are bit-identical
//! and consumers never share RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed for a named consumer stream.
pub fn derive(seed: u64, stream: u64) -> u64 {
    mix(seed ^ GOLDEN.wrapping_mul(stream.wrapping_add(1)))
}

/// Two-level derivation, e.g. per-stream then per-batch.
pub fn derive2(seed: u64, stream: u64, index: u64) -> u64 {
    derive(derive(seed, stream), index)
}

/// Seeded RNG for a consumer stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream))
}
