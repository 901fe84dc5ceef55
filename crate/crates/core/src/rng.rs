//! Deterministic keyed randomness.
//!
//! Every stochastic choice in the toolkit (weight init, shuffling, dropout
//! masks, loss shift draws, corpus synthesis) comes from a ChaCha8 stream
//! derived from a root seed plus a list of tags. Streams are therefore
//! reproducible across runs, platforms, and thread schedules: two call
//! sites that derive the same `(seed, tags)` always see the same bytes,
//! and unrelated call sites never share state.

use alloc::vec::Vec;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream-domain tags. Keeping them in one place avoids accidental reuse.
pub mod tag {
    pub const INIT: u64 = 0x01;
    pub const SHUFFLE: u64 = 0x02;
    pub const DROPOUT: u64 = 0x03;
    pub const SHIFT: u64 = 0x04;
    pub const GEN: u64 = 0x05;
}

/// FNV-1a over bytes; used to fold string identifiers into stream tags.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// SplitMix64 step.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Folds a seed and tag list into a single 64-bit key.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut state = seed ^ 0x6a09e667f3bcc908;
    let mut out = splitmix64(&mut state);
    for &t in tags {
        state ^= t;
        out ^= splitmix64(&mut state);
    }
    out
}

/// Derives an independent ChaCha8 stream from `(seed, tags)`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x243f6a8885a308d3;
    for &t in tags {
        state ^= splitmix64(&mut state) ^ t.rotate_left(17);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Uniform draw in [0, 1) with 53 bits of precision.
pub fn uniform_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in [lo, hi).
pub fn uniform_range(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform_f64(rng)
}

/// Uniform integer in [0, n) via 128-bit widening multiply.
pub fn uniform_usize(rng: &mut impl RngCore, n: usize) -> usize {
    debug_assert!(n > 0);
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Bernoulli draw: true with probability `p`.
pub fn bernoulli(rng: &mut impl RngCore, p: f64) -> bool {
    uniform_f64(rng) < p
}

/// Standard normal via Box–Muller (first coordinate only).
pub fn normal(rng: &mut impl RngCore) -> f64 {
    use num_traits::Float;
    let u1 = uniform_f64(rng).max(1e-300);
    let u2 = uniform_f64(rng);
    Float::sqrt(-2.0 * Float::ln(u1)) * Float::cos(2.0 * core::f64::consts::PI * u2)
}

/// Poisson draw by inversion of the CDF. Walks the PMF from k = 0, so it
/// is exact for the small rates used here; the walk is capped to keep
/// pathological rates from spinning.
pub fn poisson_inversion(rng: &mut impl RngCore, lambda: f64) -> usize {
    use num_traits::Float;
    debug_assert!(lambda > 0.0);
    let u = uniform_f64(rng);
    let mut p = Float::exp(-lambda);
    let mut cdf = p;
    let mut k = 0usize;
    while u > cdf && k < 4096 {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
    }
    k
}

/// In-place Fisher–Yates shuffle.
pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_usize(rng, i + 1);
        items.swap(i, j);
    }
}

/// Convenience: a shuffled index permutation of length `n`.
pub fn permutation(rng: &mut impl RngCore, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(rng, &mut idx);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_tag_sensitive() {
        let mut a = stream(7, &[tag::INIT, 3]);
        let mut b = stream(7, &[tag::INIT, 3]);
        let mut c = stream(7, &[tag::INIT, 4]);
        let (xa, xb, xc) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = stream(1, &[]);
        for _ in 0..1000 {
            let u = uniform_f64(&mut rng);
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn bernoulli_degenerate_endpoints() {
        let mut rng = stream(2, &[]);
        for _ in 0..200 {
            assert!(!bernoulli(&mut rng, 0.0));
            assert!(bernoulli(&mut rng, 1.0));
        }
    }

    #[test]
    fn poisson_mean_close_to_lambda() {
        let mut rng = stream(3, &[]);
        let lambda = 1.7;
        let n = 20_000;
        let total: usize = (0..n).map(|_| poisson_inversion(&mut rng, lambda)).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - lambda).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = stream(4, &[]);
        let mut v: Vec<usize> = (0..50).collect();
        shuffle(&mut rng, &mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
