//! Deterministic seed derivation.
//!
//! Every random draw in the crate flows from a single run seed through
//! `derive_seed`, so independent streams (per utterance, per training step,
//! per negative-pair shuffle) never alias and runs replay bit-for-bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// splitmix64 finalizer; decorrelates nearby (seed, index) pairs.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed, a stream label, and an index.
pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    let mut h = mix64(parent);
    for b in label.as_bytes() {
        h = mix64(h ^ u64::from(*b));
    }
    mix64(h ^ index)
}

/// Seeded RNG for a derived stream.
pub fn rng_for(parent: u64, label: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(parent, label, index))
}
