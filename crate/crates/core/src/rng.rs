//! Seeded PRNG streams.
//!
//! Every stochastic step draws from its own ChaCha stream keyed by
//! `(seed, purpose, client, round)`, so results never depend on the order
//! in which workers happen to run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for; keeps e.g. partition and training draws apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Blobs = 1,
    Holdout = 2,
    Partition = 3,
    Init = 4,
    Train = 5,
    Standalone = 6,
    FreeRider = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, purpose: Purpose, client: u64, round: u64) -> StreamRng {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ purpose as u64);
    h = splitmix64(h ^ client);
    h = splitmix64(h ^ round);
    ChaCha8Rng::seed_from_u64(h)
}
