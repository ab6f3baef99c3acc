//! Deterministic discrete-event simulator for the mixed-policy IPID side
//! channel in Linux-style IP stacks and the off-path TCP attacks it enables.
//!
//! The crate models three parties on virtual links: a server running a
//! Linux-like stack (hash-bucketed IPID counters, PMTUD route cache,
//! challenge-ACK rate limiting), a legitimate client, and an off-path
//! attacker that can spoof but never observe other hosts' traffic. On top of
//! the simulator sit the attacker's inference phases (IPID downgrade, hash
//! collision search, connection/port detection, sequence and ACK inference,
//! reset/injection) plus two hardened IPID policies used as countermeasure
//! controls.
//!
//! Everything is driven by a single seeded RNG per scenario; identical
//! (config, seed) pairs replay to byte-identical traces.

pub mod attacker;
pub mod countermeasures;
pub mod net;
pub mod scenario;
pub mod victim;

pub use net::packet::{IcmpMessage, Ipv4Header, Packet, PacketBody, Protocol, TcpFlags, TcpSegment};
pub use net::seq::seq_in_window;
pub use net::sim::{Event, EventAction, HostId, LinkModel, Simulation};
pub use attacker::{AttackConfig, FailureReason, Phase};
pub use scenario::config::{ConfigError, ScenarioConfig, ScenarioKind};
pub use scenario::metrics::{summarize, AttackOutcome, AttackReport, MetricsSummary, PhaseReport};
pub use scenario::runner::{run_batch, run_batch_with, run_scenario, RunOptions};
pub use scenario::stats::{collision_probability, oracle_small_pool, success_rate_sigma};
pub use victim::endpoint::{Endpoint, EndpointConfig, FourTuple, TcpConnState};
pub use victim::host::{ClientHost, ClientState, VictimHost};
pub use victim::ipid::{hash_counter_index, IpidAssigner, PolicyVariant, HASH_COUNTER_SLOTS};
pub use victim::pmtud::{PmtudConfig, RouteCache};
