//! Seed expansion. Every random stream in the crate is derived from one user
//! seed plus a fixed component tag, so runs are reproducible component by
//! component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed for `tag` from `seed`.
pub fn derive(seed: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(seed ^ mix(h))
}

pub fn derive_indexed(seed: u64, tag: &str, index: u64) -> u64 {
    mix(derive(seed, tag) ^ mix(index.wrapping_add(1)))
}

pub fn rng(seed: u64, tag: &str) -> Rng {
    Rng::seed_from_u64(derive(seed, tag))
}
