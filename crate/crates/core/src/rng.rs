//! Seeded RNG substreams and a stable 64-bit hash for deriving them.
//!
//! Sampling loops index into per-item substreams so results do not depend on
//! worker count or iteration order.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

/// FNV-1a over the bytes of the inputs, finalized with a splitmix64 round.
/// Stable across platforms and releases, unlike `DefaultHasher`.
pub fn stable_hash(parts: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for byte in part.to_le_bytes() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    splitmix64(h)
}

/// Same hash over a string key (used for sweep cell coordinates).
pub fn stable_hash_str(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ splitmix64(seed);
    for byte in key.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent RNG stream for item `index` under the given seed.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// Standard normal draw converted into the working scalar type.
pub fn standard_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::c(rng.sample::<f64, _>(StandardNormal))
}

/// Vector of standard normal draws.
pub fn normal_vec<T: Scalar, R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<T> {
    (0..len).map(|_| standard_normal(rng)).collect()
}

/// Uniform draw in `[0, 1)` converted into the working scalar type.
pub fn uniform01<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::c(rng.random::<f64>())
}
