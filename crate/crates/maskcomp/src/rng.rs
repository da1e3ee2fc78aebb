//! Seed derivation and sampling helpers.
//!
//! All randomness in the repo flows from explicit u64 seeds; nothing ever
//! touches OS entropy, so identical configs replay byte-identically.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Mixes a root seed with stream tags into an independent child seed
/// (splitmix64 steps over each tag).
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    let mut state = root;
    for &t in tags {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(t);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}

/// One standard-normal draw via Box-Muller.
pub fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
