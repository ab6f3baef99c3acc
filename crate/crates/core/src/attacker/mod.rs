//! The off-path adversary: ICMP forgery, IPID-stream observation, hash
//! collision search, connection/port detection, sequence and acknowledgment
//! inference, and the final reset or injection.
//!
//! Everything here sees the network exclusively through [`AttackerIo`]: it
//! can send packets (spoofed or not), advance virtual time, and read packets
//! delivered to attacker-owned addresses. No function in this module holds a
//! reference to victim state; correctness of inferred values is checked
//! out-of-band by the scenario runner against ground truth.

pub mod ack;
pub mod collision;
pub mod downgrade;
pub mod exec;
pub mod observe;
pub mod port;
pub mod seqinfer;

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::net::packet::Packet;
use crate::net::sim::{HostId, Simulation};

/// Attack pipeline phases, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Downgrade,
    Collision,
    PortScan,
    SeqInference,
    ChallengeWindow,
    ExactSeq,
    AckInference,
    Execute,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::Downgrade,
        Phase::Collision,
        Phase::PortScan,
        Phase::SeqInference,
        Phase::ChallengeWindow,
        Phase::ExactSeq,
        Phase::AckInference,
        Phase::Execute,
    ];

    #[must_use]
    pub fn name(self) -> &'static str {
        match self {
            Phase::Downgrade => "downgrade",
            Phase::Collision => "collision",
            Phase::PortScan => "port_scan",
            Phase::SeqInference => "seq_inference",
            Phase::ChallengeWindow => "challenge_window",
            Phase::ExactSeq => "exact_seq",
            Phase::AckInference => "ack_inference",
            Phase::Execute => "execute",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Phase, String> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown phase `{s}` (expected one of downgrade, collision, port_scan, seq_inference, challenge_window, exact_seq, ack_inference, execute)"))
    }
}

/// Why a phase (and with it the attack) failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    /// Hash collision search exhausted the address pool.
    NoCollision,
    /// No port in the scanned range produced a challenge ACK.
    PortNotFound,
    /// A probe hit the exact expected sequence and tore the connection down.
    ConnectionReset,
    /// Detection signal stayed contradictory after the configured retries.
    Ambiguous,
    /// The duplicate-ACK rate contrast never appeared.
    NoJitter,
    /// The lower edge of the challenge-ACK window could not be found.
    NoBoundary,
    /// Inferred state no longer matched the live connection.
    Stale,
    /// Injected segment carried an acknowledgment the victim rejected.
    BadAck,
    /// Phase exceeded its virtual-time budget.
    Timeout(Phase),
}

impl std::fmt::Display for FailureReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FailureReason::Timeout(p) => write!(f, "timeout({})", p.name()),
            other => {
                let s = match other {
                    FailureReason::NoCollision => "no_collision",
                    FailureReason::PortNotFound => "port_not_found",
                    FailureReason::ConnectionReset => "connection_reset",
                    FailureReason::Ambiguous => "ambiguous",
                    FailureReason::NoJitter => "no_jitter",
                    FailureReason::NoBoundary => "no_boundary",
                    FailureReason::Stale => "stale",
                    FailureReason::BadAck => "bad_ack",
                    FailureReason::Timeout(_) => unreachable!(),
                };
                f.write_str(s)
            }
        }
    }
}

/// Attacker-side parameters.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub server: Ipv4Addr,
    pub server_port: u16,
    pub client: Ipv4Addr,
    /// Attacker-owned address block used for the collision search.
    pub addr_pool_base: Ipv4Addr,
    pub addr_pool_size: u32,
    /// Send-rate ceiling for inference phases (any sliding 1 s window).
    pub probe_rate_pps: u32,
    /// Separate, higher ceiling for the port sweep, which needs more
    /// bandwidth to cover the ephemeral range quickly.
    pub port_scan_rate_pps: u32,
    /// Ephemeral port range scanned for the client's port, inclusive.
    pub port_range: (u16, u16),
    /// How many times an ambiguous detection is retried before giving up.
    pub retry_on_ambiguity: u32,
    /// Echo-request cadence that keeps observed counters linear.
    pub echo_interval_ms: u64,
    /// Source port for collision-trigger SYNs; outside `port_range` so the
    /// trigger never aliases the real connection.
    pub trigger_sport: u16,
    /// The victim's per-connection challenge-ACK spacing, as assumed by the
    /// attacker when arming-rate waits are needed.
    pub challenge_ack_interval_ms: u64,
    /// Receive window the attacker assumes when striding the sequence space.
    pub assumed_rcv_wnd: u32,
    /// Peer send window assumed when reasoning about acceptable ACKs.
    pub assumed_snd_wnd: u32,
    pub phase_timeout_ms: BTreeMap<Phase, u64>,
}

impl AttackConfig {
    #[must_use]
    pub fn new(server: Ipv4Addr, server_port: u16, client: Ipv4Addr, pool_base: Ipv4Addr, pool_size: u32) -> AttackConfig {
        AttackConfig {
            server,
            server_port,
            client,
            addr_pool_base: pool_base,
            addr_pool_size: pool_size,
            probe_rate_pps: 300,
            port_scan_rate_pps: 1000,
            port_range: (32_768, 61_000),
            retry_on_ambiguity: 1,
            echo_interval_ms: 8,
            trigger_sport: 9_999,
            challenge_ack_interval_ms: 500,
            assumed_rcv_wnd: 87_380,
            assumed_snd_wnd: 65_535,
            phase_timeout_ms: AttackConfig::default_timeouts(),
        }
    }

    #[must_use]
    pub fn default_timeouts() -> BTreeMap<Phase, u64> {
        [
            (Phase::Downgrade, 10_000),
            (Phase::Collision, 600_000),
            (Phase::PortScan, 200_000),
            (Phase::SeqInference, 900_000),
            (Phase::ChallengeWindow, 60_000),
            (Phase::ExactSeq, 120_000),
            (Phase::AckInference, 120_000),
            (Phase::Execute, 60_000),
        ]
        .into_iter()
        .collect()
    }

    #[must_use]
    pub fn timeout(&self, phase: Phase) -> u64 {
        self.phase_timeout_ms.get(&phase).copied().unwrap_or(u64::MAX)
    }

    #[must_use]
    pub fn pool_addr(&self, index: u32) -> Ipv4Addr {
        debug_assert!(index < self.addr_pool_size);
        Ipv4Addr::from(u32::from(self.addr_pool_base).wrapping_add(index))
    }
}

/// Per-phase bookkeeping destined for the attack report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub virtual_ms: u64,
    pub packets_sent: u64,
    pub outcome: PhaseOutcome,
    pub inferred_value: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseOutcome {
    Success,
    Failure(FailureReason),
}

/// Everything the attacker can do: send, wait, and read its own mail.
pub struct AttackerIo<'a> {
    sim: &'a mut Simulation,
    host: HostId,
    send_times: Vec<u64>,
    rtt_ms: Option<u64>,
}

impl<'a> AttackerIo<'a> {
    pub fn new(sim: &'a mut Simulation, host: HostId) -> AttackerIo<'a> {
        AttackerIo { sim, host, send_times: Vec::new(), rtt_ms: None }
    }

    /// Read-only view of the simulation, for harness-side ground-truth
    /// checks between phases. The attack logic itself never uses this.
    #[must_use]
    pub fn sim(&self) -> &Simulation {
        self.sim
    }

    #[must_use]
    pub fn now(&self) -> u64 {
        self.sim.now()
    }

    pub fn send(&mut self, pkt: Packet) {
        self.send_times.push(self.sim.now());
        self.sim.transmit(self.host, pkt);
    }

    pub fn advance_to(&mut self, t: u64) {
        self.sim.run_until(t.max(self.sim.now()));
    }

    pub fn advance(&mut self, dt: u64) {
        let t = self.sim.now() + dt;
        self.sim.run_until(t);
    }

    /// Packets delivered to attacker-owned addresses since the last poll,
    /// as (arrival_time, packet).
    pub fn poll(&mut self) -> Vec<(u64, Packet)> {
        self.sim.drain_mailbox(self.host)
    }

    pub fn note(&mut self, text: impl AsRef<str>) {
        self.sim.record_note(self.host, text);
    }

    #[must_use]
    pub fn packets_sent(&self) -> u64 {
        self.send_times.len() as u64
    }

    #[must_use]
    pub fn send_times(&self) -> &[u64] {
        &self.send_times
    }

    /// Maximum number of sends inside any sliding 1000 ms window; the probe
    /// budget audit compares this against the configured rate.
    #[must_use]
    pub fn peak_rate_pps(&self) -> usize {
        let times = &self.send_times;
        let mut best = 0;
        let mut lo = 0;
        for hi in 0..times.len() {
            while times[hi] - times[lo] >= 1000 {
                lo += 1;
            }
            best = best.max(hi - lo + 1);
        }
        best
    }

    /// Round-trip time to the server measured with one echo from `src`
    /// (which must be attacker-owned). Cached after the first success.
    pub fn measure_rtt(&mut self, src: Ipv4Addr, server: Ipv4Addr) -> Option<u64> {
        if let Some(r) = self.rtt_ms {
            return Some(r);
        }
        for attempt in 0..3u16 {
            let sent = self.now();
            self.send(Packet::icmp(
                src,
                server,
                0,
                false,
                crate::net::packet::IcmpMessage::EchoRequest { id: 0xfff0, seqno: attempt },
            ));
            let deadline = sent + 2_000;
            while self.now() < deadline {
                self.advance(1);
                for (at, pkt) in self.poll() {
                    if let crate::net::packet::PacketBody::Icmp(
                        crate::net::packet::IcmpMessage::EchoReply { id: 0xfff0, seqno },
                    ) = pkt.body
                    {
                        if seqno == attempt && pkt.header.dst == src {
                            let rtt = at - sent;
                            self.rtt_ms = Some(rtt);
                            return Some(rtt);
                        }
                    }
                }
            }
        }
        None
    }

    /// Best-known RTT with a conservative fallback.
    #[must_use]
    pub fn rtt(&self) -> u64 {
        self.rtt_ms.unwrap_or(200)
    }

    /// Settle time after the last send of an observation before its effects
    /// are readable: one RTT plus one echo interval plus scheduling slack.
    #[must_use]
    pub fn settle_ms(&self) -> u64 {
        self.rtt() + 30
    }
}

/// Floor-scheduled send pacer: slot k fires at `start + k*1000/rate`, which
/// keeps any sliding one-second window at or below `rate` sends.
#[derive(Debug, Clone)]
pub struct Pacer {
    start_ms: u64,
    rate_pps: u32,
    issued: u64,
}

impl Pacer {
    #[must_use]
    pub fn new(start_ms: u64, rate_pps: u32) -> Pacer {
        assert!(rate_pps > 0, "pacer needs a positive rate");
        Pacer { start_ms, rate_pps, issued: 0 }
    }

    /// Time of the next slot without consuming it.
    #[must_use]
    pub fn peek(&self) -> u64 {
        self.start_ms + self.issued * 1000 / u64::from(self.rate_pps)
    }

    /// Consume and return the next slot time.
    pub fn take(&mut self) -> u64 {
        let t = self.peek();
        self.issued += 1;
        t
    }

    /// Re-anchor the pacer at `now` (after a long idle wait there is no
    /// need to "catch up" on unused slots).
    pub fn realign(&mut self, now: u64) {
        if self.peek() < now {
            self.start_ms = now;
            self.issued = 0;
        }
    }
}
