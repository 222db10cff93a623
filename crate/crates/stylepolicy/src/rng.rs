//! Seeded random streams.
//!
//! All randomness flows through ChaCha streams derived from a root seed plus
//! a purpose tag (and optional index), so every consumer is reproducible and
//! independent of every other: resuming a run or adding files never shifts
//! unrelated draws.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used to fold purpose tags and filenames into seeds. Stable across
/// platforms and releases, unlike the std hasher.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic sub-stream for (seed, tag, index).
pub fn stream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mixed = splitmix64(seed ^ fnv1a64(tag.as_bytes()).rotate_left(17) ^ splitmix64(index));
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Uniform draw in [lo, hi) as f64.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen::<f64>() * (hi - lo) + lo
}

/// Standard logistic sample via inverse CDF, clamped away from the endpoints
/// so the result is always finite.
pub fn logistic(rng: &mut ChaCha8Rng) -> f64 {
    let u = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
    (u / (1.0 - u)).ln()
}
