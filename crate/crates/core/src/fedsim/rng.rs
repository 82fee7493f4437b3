//! Keyed random streams.
//!
//! Every random draw in a simulation comes from a stream keyed by
//! `(seed, purpose, round, group, client)`, so results do not depend on the
//! order in which clients are processed or on the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Sampling = 1,
    Batching = 2,
    Noise = 3,
    Init = 4,
    Partition = 5,
    Data = 6,
}

/// A fresh generator for one `(seed, purpose, round, group, client)` key.
pub fn stream(seed: u64, purpose: Purpose, round: u64, group: u64, client: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    // Rounds never get close to 2^56, so the top byte carries the purpose.
    let tagged = (round & 0x00ff_ffff_ffff_ffff) | (u64::from(purpose as u8) << 56);
    key[8..16].copy_from_slice(&tagged.to_le_bytes());
    key[16..24].copy_from_slice(&group.to_le_bytes());
    key[24..32].copy_from_slice(&client.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
