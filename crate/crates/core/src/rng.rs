//! Seeded random streams. Every stochastic operation takes an explicit generator.

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

pub use rand::{Rng, RngExt};

/// The generator used throughout the crate.
pub type SeededRng = SplitMix64;

pub fn seeded(seed: u64) -> SeededRng {
    SplitMix64::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed, a purpose tag and an index,
/// so per-round streams never depend on how much randomness earlier rounds consumed.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    // FNV-1a over the tag, then the splitmix finalizer over the combination.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = base
        .wrapping_add(h.rotate_left(17))
        .wrapping_add(index.wrapping_mul(0x9e3779b97f4a7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn derived(base: u64, tag: &str, index: u64) -> SeededRng {
    seeded(derive_seed(base, tag, index))
}

/// Standard normal draw (Box-Muller, one value per call).
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
