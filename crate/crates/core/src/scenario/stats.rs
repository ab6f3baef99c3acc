//! Collision statistics: the closed-form model for the hash-counter
//! collision search and a Monte-Carlo oracle that checks the model against
//! the actual hash function over random boot keys.

use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::net::packet::Protocol;
use crate::victim::ipid::{hash_counter_index, HASH_COUNTER_SLOTS};

/// Probability that at least one of `pool_size` independent uniformly
/// hashed flows lands in the same counter slot as a fixed target flow,
/// with `slots` slots total: `1 - (1 - 1/slots)^pool_size`.
#[must_use]
pub fn collision_probability(pool_size: u64, slots: u64) -> f64 {
    assert!(slots >= 1, "need at least one slot");
    if pool_size == 0 {
        return 0.0;
    }
    let miss = 1.0 - 1.0 / slots as f64;
    1.0 - miss.powf(pool_size as f64)
}

/// Standard deviation of an empirical success rate over `trials` draws
/// with true probability `p`.
#[must_use]
pub fn success_rate_sigma(p: f64, trials: u64) -> f64 {
    assert!(trials >= 1);
    (p * (1.0 - p) / trials as f64).sqrt()
}

/// Empirical collision rate of the real hash function, reduced to
/// `slots` slots by residue (so `slots` must divide the full table size).
///
/// Each trial draws a fresh boot key and fresh addresses, then asks: does
/// any of `pool_size` candidate ICMP flows share a (reduced) slot with the
/// server→client TCP flow? With uniform hashing the rate must match
/// [`collision_probability`]; a systematic gap would mean the hash mixes
/// addresses poorly at that modulus.
#[must_use]
pub fn oracle_small_pool(slots: usize, pool_size: u32, trials: u32, seed: u64) -> f64 {
    assert!(slots >= 1 && HASH_COUNTER_SLOTS % slots == 0, "slots must divide the full table size");
    assert!(trials >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0u32;
    for _ in 0..trials {
        let boot_key: u64 = rng.random();
        let server = Ipv4Addr::from(rng.random::<u32>());
        let client = Ipv4Addr::from(rng.random::<u32>());
        let pool_base: u32 = rng.random();
        let target = hash_counter_index(server, client, Protocol::Tcp, boot_key) % slots;
        let hit = (0..pool_size).any(|i| {
            let cand = Ipv4Addr::from(pool_base.wrapping_add(i));
            hash_counter_index(server, cand, Protocol::Icmp, boot_key) % slots == target
        });
        if hit {
            hits += 1;
        }
    }
    f64::from(hits) / f64::from(trials)
}
