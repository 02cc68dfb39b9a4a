//! Deterministic hashing and RNG stream derivation.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` whose seed is
//! derived from a global seed plus stable string/integer keys, so parallel
//! jobs reproduce bit-for-bit regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a. Stable across platforms and toolchains, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// splitmix64 finaliser
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, key: &str) -> u64 {
    mix64(base ^ fnv1a(key.as_bytes()))
}

pub fn rng_for(base: u64, key: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(base, key))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
