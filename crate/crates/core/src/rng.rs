//! Deterministic random stream derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream derived from a
//! root seed and a path of integer tags, for example `(seed, [MODEL, 4, INIT])`.
//! Each unit of work derives its own stream from stable identifiers, so results
//! never depend on worker count, scheduling, or call interleaving across models.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tags spent on stream paths. Values are arbitrary but frozen: changing any
/// of them changes every derived stream and therefore every trained artifact.
pub mod tag {
    pub const MODEL: u64 = 0x01;
    pub const INIT: u64 = 0x02;
    pub const TRAIN: u64 = 0x03;
    pub const MP: u64 = 0x04;
    pub const VD: u64 = 0x05;
    pub const DATA: u64 = 0x06;
    pub const AE: u64 = 0x07;
    pub const AUGMENT: u64 = 0x08;
    pub const PROBE: u64 = 0x09;
}

/// SplitMix64 finalizer, used as the mixing function for tag chains.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent ChaCha8 stream from `seed` and a tag path.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed);
    for &t in tags {
        state = mix(state ^ mix(t));
    }
    let mut key = [0u8; 32];
    let mut s = state;
    for chunk in key.chunks_exact_mut(8) {
        s = mix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Uniform draw in `[lo, hi)` with 53-bit resolution.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0);
    (lo as f64 + (hi as f64 - lo as f64) * u) as f32
}

/// Standard normal draw via Box-Muller on open-interval uniforms.
pub fn normal(rng: &mut ChaCha8Rng) -> f32 {
    let u1 = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0);
    let u2 = (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0);
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

/// Fisher-Yates shuffle of `xs`.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, xs: &mut [T]) {
    for i in (1..xs.len()).rev() {
        // Unbiased bounded draw by rejection.
        let bound = (i + 1) as u64;
        let zone = u64::MAX - (u64::MAX - bound + 1) % bound;
        let j = loop {
            let r = rng.next_u64();
            if r <= zone {
                break (r % bound) as usize;
            }
        };
        xs.swap(i, j);
    }
}
