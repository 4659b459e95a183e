//! Named seed derivation.
//!
//! Every random stream in the crate is a [`ChaCha8Rng`] seeded from a base
//! seed and a label, so runs are reproducible and independent streams never
//! share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mix a label into a base seed.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    // FNV-1a over the label bytes
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(base ^ splitmix64(h))
}

/// Mix an index into a base seed.
pub fn derive_indexed(base: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(base, label) ^ splitmix64(index.wrapping_add(1)))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(base: u64, label: &str) -> ChaCha8Rng {
    rng_from(derive_seed(base, label))
}
