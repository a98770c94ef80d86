//! Deterministic RNG streams.
//!
//! All randomness in the crate flows through ChaCha8 generators seeded from
//! explicit `u64` seeds, so every pipeline stage is bit-reproducible. Derived
//! streams (per-sample, per-seed) come from mixing the base seed with a
//! stream index, which keeps parallel generation independent of worker
//! scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates consecutive stream indices.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent sub-seed from a base seed and a stream index.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    mix(base ^ mix(stream))
}

/// RNG for the given seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// RNG for stream `stream` of base seed `base`.
pub fn stream_rng(base: u64, stream: u64) -> ChaCha8Rng {
    rng_from_seed(derive_seed(base, stream))
}
