//! Keyed, counter-based random streams.
//!
//! Every random quantity in the crate is a pure function of an explicit key
//! tuple. Nothing reads a global generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key tuple into one 64-bit value.
pub fn hash_keys(keys: &[u64]) -> u64 {
    keys.iter()
        .fold(0x5151_7A3D_0C0F_FEE5u64, |acc, &k| mix64(acc ^ mix64(k)))
}

/// Uniform in [0, 1) addressed by (key, counter).
#[inline]
pub fn uniform_at(key: u64, counter: u64) -> f64 {
    let bits = mix64(key ^ mix64(counter.wrapping_add(0xA076_1D64_78BD_642F)));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// A ChaCha stream whose seed is derived from the key tuple.
pub fn stream(keys: &[u64]) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    let mut h = hash_keys(keys);
    for chunk in seed.chunks_mut(8) {
        h = mix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Domain tags so streams for different purposes never collide.
pub mod tag {
    pub const SCENE: u64 = 0x5343_454E;
    pub const PATCH: u64 = 0x5041_5443;
    pub const INIT: u64 = 0x494E_4954;
    pub const SFT: u64 = 0x5346_5400;
    pub const TRAJ: u64 = 0x5452_414A;
    pub const EPOCH: u64 = 0x4550_4F43;
    pub const CURATE: u64 = 0x4355_5241;
    pub const FDCHECK: u64 = 0x4644_4348;
}
