//! Counter-based seed derivation.
//!
//! Every random stream in the toolkit is keyed by `(master seed, label, index)`
//! so results do not depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let a = splitmix64(master ^ fnv1a(label.as_bytes()));
    splitmix64(a ^ splitmix64(index))
}

pub fn derive_rng(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label, index))
}

/// Stable 64-bit hash for content keys (FNV-1a).
pub fn stable_hash(bytes: &[u8]) -> u64 {
    fnv1a(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "scene", 3), derive_seed(7, "scene", 3));
        assert_ne!(derive_seed(7, "scene", 3), derive_seed(7, "scene", 4));
        assert_ne!(derive_seed(7, "scene", 3), derive_seed(7, "patch", 3));
        assert_ne!(derive_seed(7, "scene", 3), derive_seed(8, "scene", 3));
        let a: u64 = derive_rng(1, "x", 0).gen();
        let b: u64 = derive_rng(1, "x", 0).gen();
        assert_eq!(a, b);
    }
}
