//! Seed derivation and keyed random streams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream addressed
//! by a key (seed, stream id). Draw `j` of stream `s` is a fixed function of
//! `(seed, s, j)`, so any mask or noise field can be regenerated on its own,
//! in any order and on any thread.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a path of labels.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)))
}

/// A ChaCha8 generator positioned at the start of stream `stream`.
pub fn keyed_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `len` i.i.d. draws from N(0, 1).
pub fn standard_normal_field(len: usize, seed: u64, stream: u64) -> Vec<f32> {
    let mut rng = keyed_rng(seed, stream);
    (0..len)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect()
}
