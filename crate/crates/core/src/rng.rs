//! Seeded random streams. Every random draw in the library comes from a
//! ChaCha stream keyed by a `u64`, and independent streams are derived by
//! hashing `(seed, index)` so work can be split without sharing state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed; distinct `index` values give unrelated streams.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    mix(mix(seed) ^ mix(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_seeds_differ() {
        let mut seen = std::collections::HashSet::new();
        for s in 0..20 {
            for i in 0..50 {
                assert!(seen.insert(sub_seed(s, i)));
            }
        }
        assert_eq!(sub_seed(3, 4), sub_seed(3, 4));
    }
}
