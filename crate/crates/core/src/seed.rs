//! Seed plumbing shared by every stage.
//!
//! A run has one user-facing seed. Each stage derives its own seed from it by
//! hashing the stage name, so running a single stage in isolation reproduces
//! exactly what the full pipeline would have done for that stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the stage called `stage`: `mix64(seed ^ fnv1a(stage))`.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    mix64(seed ^ fnv1a(stage.as_bytes()))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn stages_differ() {
        assert_ne!(stage_seed(1, "net"), stage_seed(1, "task-data"));
        assert_eq!(stage_seed(9, "net"), stage_seed(9, "net"));
    }
}
