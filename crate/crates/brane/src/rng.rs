//! Seed derivation.
//!
//! Every stochastic component takes an explicit `u64` seed. Derived streams
//! (per split, per record, per subset, ...) come from `mix`, a splitmix64-style
//! hash, so that independent streams never alias even for adjacent seeds.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One splitmix64 round.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a base seed and a stream tag.
pub fn mix(seed: u64, tag: u64) -> u64 {
    splitmix(splitmix(seed ^ 0x6a09_e667_f3bc_c909).wrapping_add(splitmix(tag)))
}

/// Seeded generator for a derived stream.
pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tag))
}

/// Seeded generator directly from a seed.
pub fn from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
