//! Deterministic seed derivation.
//!
//! Every stochastic component derives its generator from the experiment's
//! root seed plus a static purpose tag and integer coordinates (identity
//! index, iteration number, ...). Derivation uses a fixed splitmix64 chain,
//! so seeds are stable across runs, platforms, and library versions, and
//! two components can never alias unless given identical coordinates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One splitmix64 round: mixes `state + input` into a new state.
fn splitmix64(state: u64, input: u64) -> u64 {
    let mut z = state
        .wrapping_add(input)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a root seed, a purpose tag, and coordinates into one u64.
pub fn mix_seed(root: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut state = splitmix64(0x6C62_272E_07BB_0142, root);
    for byte in tag.as_bytes() {
        state = splitmix64(state, u64::from(*byte));
    }
    for part in parts {
        state = splitmix64(state, *part);
    }
    state
}

/// Derives a ChaCha8 generator for `(root, tag, parts)`.
pub fn derive_rng(root: u64, tag: &str, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(root, tag, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_coordinates_same_stream() {
        let mut ra = derive_rng(7, "unit", &[1, 2]);
        let mut rb = derive_rng(7, "unit", &[1, 2]);
        let a: Vec<u32> = (0..8).map(|_| ra.random()).collect();
        let b: Vec<u32> = (0..8).map(|_| rb.random()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn tag_and_parts_change_stream() {
        let base = mix_seed(7, "unit", &[1, 2]);
        assert_ne!(base, mix_seed(7, "unit", &[1, 3]));
        assert_ne!(base, mix_seed(7, "tinu", &[1, 2]));
        assert_ne!(base, mix_seed(8, "unit", &[1, 2]));
    }

    #[test]
    fn part_boundaries_are_unambiguous() {
        // (1,2) vs (12,) style collisions must not happen.
        assert_ne!(mix_seed(0, "t", &[1, 2]), mix_seed(0, "t", &[12]));
        let mut r = derive_rng(0, "t", &[]);
        let _: f64 = r.random(); // derived rng is usable
    }
}
