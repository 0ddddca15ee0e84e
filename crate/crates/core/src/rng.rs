//! Seed derivation for the deterministic generators used across the crate.
//!
//! Every random choice is drawn from a ChaCha8 stream identified by a
//! `(seed, domain, stream)` triple, so independent consumers never share
//! state and results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Separates generators that share a user seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 0x1001,
    Schedule = 0x1002,
    Flips = 0x1003,
    Groups = 0x1004,
    Splits = 0x1005,
    Candidates = 0x1006,
    CandidateFlips = 0x1007,
    Synthetic = 0x1008,
    Shadows = 0x1009,
    Probes = 0x100a,
    Insert = 0x100b,
}

pub fn stream(seed: u64, domain: Domain, stream: u64) -> ChaCha8Rng {
    let mixed = seed ^ (domain as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(stream);
    rng
}
