//! Stable seed derivation. Every random choice in the crate is drawn from a
//! generator seeded by hashing a parent seed with a path of integers, so
//! results never depend on iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a seed and a path of integers.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |h, &p| mix(h ^ mix(p)))
}

/// Stream tags, so unrelated consumers of the same parent seed never share a
/// generator.
pub mod stream {
    pub const WORLD_FG: u64 = 1;
    pub const WORLD_BG: u64 = 2;
    pub const COMPOSITE: u64 = 3;
    pub const ANCHOR: u64 = 4;
    pub const ALIGN: u64 = 5;
    pub const PROBE: u64 = 6;
    pub const DATASET: u64 = 7;
    pub const TEACHER: u64 = 8;
    pub const SAMPLER: u64 = 9;
    pub const EVAL: u64 = 10;
    pub const CONTROL: u64 = 11;
}

pub fn rng(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(seed, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_stable_and_path_sensitive() {
        assert_eq!(derive(7, &[1, 2, 3]), derive(7, &[1, 2, 3]));
        assert_ne!(derive(7, &[1, 2, 3]), derive(7, &[1, 3, 2]));
        assert_ne!(derive(7, &[1]), derive(8, &[1]));
        // pinned so a change to the mixer is caught
        assert_eq!(derive(0, &[]), 0xe220_a839_7b1d_cdaf);
    }
}
