//! Deterministic random streams derived from `(seed, domain, indices)`.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by the run
//! seed, a domain tag and up to two indices (typically step and sample), so
//! results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream domains. Distinct tags never share a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Augment = 2,
    Batch = 3,
    Scene = 4,
    Finetune = 5,
    Probe = 6,
}

pub fn stream(seed: u64, domain: Domain, a: u64, b: u64) -> Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
