//! Keyed deterministic random streams.
//!
//! Every random decision in the engine draws from a stream derived from
//! `(master_seed, replicate, stage, subject, week)`. Streams for distinct
//! targets are independent, so results do not depend on the order in which
//! targets are processed or on the parallel schedule.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Pipeline stage tag mixed into the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Frequency,
    Sports,
    Counts,
    /// Simulation-harness streams (generation, amputation, per-method seeds).
    Sim(u64),
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Frequency => 1,
            Stage::Sports => 2,
            Stage::Counts => 3,
            Stage::Sim(k) => 0x1000 + k,
        }
    }
}

/// FNV-1a, used to fold string identifiers into the stream key. Stable
/// across platforms and releases, unlike the std hasher.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives the random stream for one imputation target.
pub fn stream(
    master_seed: u64,
    replicate: u32,
    stage: Stage,
    subject: &str,
    week: u32,
) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&u64::from(replicate).to_le_bytes());
    seed[16..24].copy_from_slice(&stage.tag().to_le_bytes());
    let ident = fnv1a(subject.as_bytes()) ^ u64::from(week).rotate_left(32);
    seed[24..32].copy_from_slice(&ident.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}
