//! Seed derivation and the two primitive draws everything else is built on.
//!
//! All randomness comes from ChaCha8 (`rand_chacha`), keyed by a `u64` seed
//! expanded with `seed_from_u64`, with independent streams selected through
//! the ChaCha stream counter. Uniforms take the top 53 bits of one `u64`
//! output; gaussians use the basic Box-Muller transform on two uniforms and
//! keep only the cosine branch. This layout is what [`ALGORITHM_ID`] names,
//! so a port that follows it reproduces datasets and initializations exactly.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ALGORITHM_ID: &str = "chacha8-le64-boxmuller-v1";

/// Stream offsets, so different consumers of one seed never share a stream.
pub mod stream {
    pub const INIT: u64 = 1 << 32;
    pub const DATA: u64 = 2 << 32;
    pub const SPLIT: u64 = 3 << 32;
    pub const BATCH: u64 = 4 << 32;
    pub const SEARCH: u64 = 5 << 32;
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform in `[0, 1)`.
pub fn unit_f64<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in `(0, 1]`, safe to take a logarithm of.
fn open_unit<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    1.0 - unit_f64(rng)
}

pub fn gaussian<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    let u1 = open_unit(rng);
    let u2 = unit_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn bernoulli<R: RngCore + ?Sized>(rng: &mut R, p: f64) -> bool {
    unit_f64(rng) < p
}

/// Uniform index in `0..n` by rejection, free of modulo bias.
pub fn index<R: RngCore + ?Sized>(rng: &mut R, n: usize) -> usize {
    assert!(n > 0);
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return (v % n) as usize;
        }
    }
}

/// Fisher-Yates with [`index`].
pub fn shuffle<T, R: RngCore + ?Sized>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = index(rng, i + 1);
        items.swap(i, j);
    }
}
