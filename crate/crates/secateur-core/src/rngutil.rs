//! Seeded random streams.
//!
//! Every training run owns its generators; streams are derived from the run
//! seed plus a label so that adding a consumer never shifts another stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Derive an independent generator from a base seed and a stream label.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    // FNV-1a over the label, folded into the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Uniform draw in the open interval (0, 1).
pub fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}

/// Standard normal via Box-Muller on open-interval uniforms.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1 = open_unit(rng);
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}
