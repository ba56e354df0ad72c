//! Deterministic randomness.
//!
//! Every stochastic choice in the crate (init, shuffling, pattern draws,
//! poisoning selection, augmentation) draws from a ChaCha20 stream keyed by
//! `(seed, domain)` through SHA-256. Streams for different domains are
//! independent, so adding a consumer never perturbs existing ones, and the
//! integer/float conversions are written out here so sampled values stay
//! bit-stable across toolchain and dependency upgrades.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// A named, seeded random stream.
pub fn stream(seed: u64, domain: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0x1f]); // separator so (seed, domain) pairs cannot collide
    h.update(domain.as_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha20Rng::from_seed(key)
}

/// Uniform draw from `[0, 1)` with 53 bits of precision.
pub fn uniform_unit(rng: &mut ChaCha20Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw from `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha20Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform_unit(rng)
}

/// Unbiased uniform draw from `0..n` via rejection sampling.
pub fn uniform_index(rng: &mut ChaCha20Rng, n: usize) -> usize {
    assert!(n > 0, "uniform_index: empty range");
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX - n + 1) % n; // largest multiple of n, minus 1
    loop {
        let v = rng.next_u64();
        if v <= zone {
            return (v % n) as usize;
        }
    }
}

/// Bernoulli draw with success probability `p`.
pub fn coin(rng: &mut ChaCha20Rng, p: f64) -> bool {
    uniform_unit(rng) < p
}

/// In-place Fisher–Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha20Rng, slice: &mut [T]) {
    for i in (1..slice.len()).rev() {
        let j = uniform_index(rng, i + 1);
        slice.swap(i, j);
    }
}

/// Samples `k` distinct indices from `0..n`, uniformly without replacement.
///
/// Returned in draw order (a uniformly random `k`-prefix of a permutation).
pub fn sample_without_replacement(rng: &mut ChaCha20Rng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} items from a population of {n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + uniform_index(rng, n - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}
