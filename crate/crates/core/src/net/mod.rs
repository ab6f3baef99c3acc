//! Packet value types, modular sequence arithmetic, seeded RNG derivation,
//! and the single-threaded discrete-event engine.

pub mod packet;
pub mod rng;
pub mod seq;
pub mod sim;
pub mod trace;
