//! Seed derivation for the per-scenario random streams.
//!
//! One scenario seed fans out into independent ChaCha8 streams (victim
//! stack, client, link loss, scenario setup, attacker choices) through a
//! fixed splitmix64 mix, so adding a consumer never perturbs the draws of an
//! existing one and replays stay bit-stable.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels; the numeric discriminant is part of the derivation rule
/// and therefore of the replay contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamId {
    VictimStack = 1,
    Client = 2,
    LinkLoss = 3,
    Setup = 4,
    Attacker = 5,
}

/// splitmix64 finalizer; full-avalanche 64-bit mix.
#[must_use]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the sub-seed for one stream of a scenario.
#[must_use]
pub fn derive_seed(scenario_seed: u64, stream: StreamId) -> u64 {
    mix64(scenario_seed ^ mix64(stream as u64))
}

/// Build the seeded generator for one stream.
#[must_use]
pub fn stream_rng(scenario_seed: u64, stream: StreamId) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(scenario_seed, stream))
}
