//! Seed derivation. Every random stream in the crate is a ChaCha8 generator seeded
//! from a `(master, pass, layer)` lineage so that draws are reproducible bit-for-bit
//! and independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one well-mixed 64-bit seed.
pub fn derive_seed(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Identifies the random stream behind one mask or weight draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedLineage {
    pub master: u64,
    pub pass: u64,
    pub layer: u64,
}

impl SeedLineage {
    pub fn new(master: u64, pass: u64, layer: u64) -> Self {
        Self { master, pass, layer }
    }

    pub fn rng(&self) -> Rng {
        Rng::seed_from_u64(derive_seed(&[self.master, self.pass, self.layer]))
    }
}

/// Named sub-streams derived from an experiment's master seed.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const TRAIN_MASKS: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const VALIDATION: u64 = 4;
    pub const TEST: u64 = 5;
    pub const DATA: u64 = 6;
}

pub fn stream_seed(master: u64, stream: u64, index: u64) -> u64 {
    derive_seed(&[master, stream, index])
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn lineage_is_reproducible_and_distinct() {
        let mut r1 = SeedLineage::new(7, 3, 1).rng();
        let mut r2 = SeedLineage::new(7, 3, 1).rng();
        let mut r3 = SeedLineage::new(7, 3, 2).rng();
        let x1: u64 = r1.random();
        assert_eq!(x1, r2.random::<u64>());
        assert_ne!(x1, r3.random::<u64>());
    }

    #[test]
    fn derive_seed_depends_on_order() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
    }
}
