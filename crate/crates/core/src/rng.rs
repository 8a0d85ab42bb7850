//! Seed derivation and small integer-only sampling helpers.
//!
//! Everything that must be reproducible across platforms (class shuffles,
//! exemplar picks, downsampling) goes through [`uniform_index`], which only
//! touches the raw `u64` stream of a ChaCha generator.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a path of integers.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_at(seed: u64, path: &[u64]) -> Rng {
    rng_from(derive(seed, path))
}

/// Unbiased integer in `0..n` by rejection on the raw 64-bit stream.
pub fn uniform_index(rng: &mut impl RngCore, n: usize) -> usize {
    assert!(n > 0, "uniform_index on empty range");
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n) - 1;
    loop {
        let v = rng.next_u64();
        if v <= zone {
            return (v % n) as usize;
        }
    }
}

/// In-place Fisher-Yates shuffle, walking from the back.
pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}

/// `k` distinct values from `0..n` in selection order (partial Fisher-Yates).
pub fn sample_without_replacement(rng: &mut impl RngCore, n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + uniform_index(rng, n - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Uniform `f64` in `[0, 1)` built from the top 53 bits.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn uniform_f64(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit_f64(rng)
}

/// Standard normal via Box-Muller.
pub fn normal_f64(rng: &mut impl RngCore) -> f64 {
    let u1 = 1.0 - unit_f64(rng);
    let u2 = unit_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
