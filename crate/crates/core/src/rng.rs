//! Deterministic random streams keyed by `(seed, purpose, index)`.
//!
//! Every parallel loop draws from its own stream so results do not depend on
//! scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream purposes; values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Purpose {
    Lhs = 1,
    DatasetNoise = 2,
    DatasetResample = 3,
    TrialNoise = 4,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
