//! IPID assignment policies.
//!
//! The baseline `MixedDfBased` policy reproduces the Linux-style dispatch:
//! RST packets send IPID 0, DF-clear packets draw from one of 2048 hash
//! counters shared across destinations and protocols, SYN/ACKs with DF set
//! send 0, and everything else uses a per-socket counter. The two hardened
//! variants change which counter TCP and RST traffic may touch.
//!
//! Hash-counter timestamps advance in coarse system ticks of 10 ms, the
//! granularity a HZ=100 kernel uses for its jiffies clock. The counter
//! increment after a use is uniform in `[1, max(1, elapsed ticks)]`, so a
//! prober that keeps a counter busy at least once per tick pins every
//! increment to exactly +1 and can read foreign uses out of the deltas.
//! A slower cadence (say one probe per 100 ms) lets ticks accumulate and
//! turns the deltas into noise; that rate floor is what the attacker's
//! observation phases are built around.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::net::packet::Protocol;
use crate::net::rng::mix64;

/// Number of shared hash counters.
pub const HASH_COUNTER_SLOTS: usize = 2048;

/// Milliseconds per system tick used for counter-timestamp bookkeeping.
pub const TICK_MS: u64 = 10;

/// How long an unused per-destination RST counter survives.
pub const DEST_COUNTER_IDLE_MS: u64 = 60_000;

/// Which assignment policy a host runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyVariant {
    /// Baseline: dispatch on DF bit and packet kind.
    MixedDfBased,
    /// Hardened: TCP always uses a per-socket counter regardless of DF.
    ProtocolFieldBased,
    /// Hardened: RST draws from a per-destination counter instead of 0.
    RstDestinationCounter,
}

/// Identity of a connection-bound counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SocketId(pub u64);

/// Everything the assigner needs to know about an outgoing packet.
#[derive(Debug, Clone, Copy)]
pub struct PacketMeta {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub protocol: Protocol,
    pub df: bool,
    pub is_rst: bool,
    pub is_syn_ack: bool,
    /// Counter of the socket emitting this packet, when one exists.
    pub socket_id: Option<SocketId>,
    /// Socket of some live connection to `dst`, used only by the
    /// destination-counter RST policy (resolved by the host, which owns the
    /// connection table).
    pub dest_socket: Option<SocketId>,
}

#[derive(Debug, Clone, Copy)]
struct HashCounter {
    value: u16,
    last_used_ms: u64,
}

#[derive(Debug, Clone, Copy)]
struct DestCounter {
    value: u16,
    last_used_ms: u64,
}

/// Which counter family produced an IPID; used for audits and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CounterClass {
    Zero,
    Hash(usize),
    Socket(SocketId),
    Destination(Ipv4Addr),
}

/// Map a flow to one of the shared counters. The kernel keys its table on
/// source address, destination address, protocol and a boot-time secret;
/// any fixed well-mixing function of those four inputs models it.
#[must_use]
pub fn hash_counter_index(src: Ipv4Addr, dst: Ipv4Addr, protocol: Protocol, boot_key: u64) -> usize {
    let mut h = mix64(boot_key);
    h = mix64(h ^ u64::from(u32::from(src)));
    h = mix64(h ^ u64::from(u32::from(dst)));
    h = mix64(h ^ u64::from(protocol.number()));
    (h % HASH_COUNTER_SLOTS as u64) as usize
}

#[derive(Debug)]
pub struct IpidAssigner {
    boot_key: u64,
    policy: PolicyVariant,
    hash_counters: Vec<HashCounter>,
    socket_counters: BTreeMap<SocketId, u16>,
    dest_counters: BTreeMap<u32, DestCounter>,
    /// TCP emissions that drew from a shared hash counter; the hardened
    /// protocol-field policy must keep this at zero.
    tcp_hash_draws: u64,
    /// TCP emissions that had no socket context and fell back to a
    /// per-destination counter under the protocol-field policy.
    socketless_tcp_fallbacks: u64,
}

impl IpidAssigner {
    /// Boot the assigner: secret key and randomized counter bases.
    #[must_use]
    pub fn new(policy: PolicyVariant, rng: &mut ChaCha8Rng) -> IpidAssigner {
        let boot_key = rng.random::<u64>();
        let hash_counters = (0..HASH_COUNTER_SLOTS)
            .map(|_| HashCounter { value: rng.random::<u16>(), last_used_ms: 0 })
            .collect();
        IpidAssigner {
            boot_key,
            policy,
            hash_counters,
            socket_counters: BTreeMap::new(),
            dest_counters: BTreeMap::new(),
            tcp_hash_draws: 0,
            socketless_tcp_fallbacks: 0,
        }
    }

    #[must_use]
    pub fn policy(&self) -> PolicyVariant {
        self.policy
    }

    #[must_use]
    pub fn boot_key(&self) -> u64 {
        self.boot_key
    }

    #[must_use]
    pub fn tcp_hash_draws(&self) -> u64 {
        self.tcp_hash_draws
    }

    #[must_use]
    pub fn socketless_tcp_fallbacks(&self) -> u64 {
        self.socketless_tcp_fallbacks
    }

    /// Index of the shared counter this flow would use.
    #[must_use]
    pub fn index_for(&self, src: Ipv4Addr, dst: Ipv4Addr, protocol: Protocol) -> usize {
        hash_counter_index(src, dst, protocol, self.boot_key)
    }

    /// Current value of a shared counter (ground truth for tests/scoring).
    #[must_use]
    pub fn hash_counter_value(&self, idx: usize) -> u16 {
        self.hash_counters[idx].value
    }

    /// Assign the IPID for an outgoing packet and report which counter
    /// family served it.
    pub fn assign(&mut self, meta: &PacketMeta, now_ms: u64, rng: &mut ChaCha8Rng) -> (u16, CounterClass) {
        match self.policy {
            PolicyVariant::MixedDfBased => self.assign_mixed(meta, now_ms, rng),
            PolicyVariant::ProtocolFieldBased => self.assign_protocol_field(meta, now_ms, rng),
            PolicyVariant::RstDestinationCounter => self.assign_rst_dest_counter(meta, now_ms, rng),
        }
    }

    /// Baseline dispatch: RST -> 0, DF clear -> shared hash counter,
    /// SYN/ACK -> 0, otherwise per-socket counter.
    fn assign_mixed(&mut self, meta: &PacketMeta, now_ms: u64, rng: &mut ChaCha8Rng) -> (u16, CounterClass) {
        if meta.is_rst {
            return (0, CounterClass::Zero);
        }
        if !meta.df {
            return self.draw_hash(meta, now_ms, rng);
        }
        if meta.is_syn_ack {
            return (0, CounterClass::Zero);
        }
        self.draw_socket(meta)
    }

    /// Hardened dispatch keyed on the protocol field: TCP never shares a
    /// counter across destinations. The zero-IPID rules for RST and SYN/ACK
    /// stay in place; a TCP emission without socket context (which the
    /// baseline would hash) falls back to a per-destination counter.
    fn assign_protocol_field(
        &mut self,
        meta: &PacketMeta,
        now_ms: u64,
        rng: &mut ChaCha8Rng,
    ) -> (u16, CounterClass) {
        if meta.is_rst {
            return (0, CounterClass::Zero);
        }
        if meta.is_syn_ack {
            return (0, CounterClass::Zero);
        }
        if meta.protocol == Protocol::Tcp {
            if meta.socket_id.is_some() {
                return self.draw_socket(meta);
            }
            self.socketless_tcp_fallbacks += 1;
            return self.draw_dest(meta.dst, now_ms, rng);
        }
        if !meta.df {
            return self.draw_hash(meta, now_ms, rng);
        }
        self.draw_socket(meta)
    }

    /// Hardened RST handling: an RST uses the counter of a live connection
    /// to its destination when one exists, otherwise a per-destination
    /// counter, making its counter effect indistinguishable from ordinary
    /// socket traffic. Non-RST packets keep the baseline dispatch.
    fn assign_rst_dest_counter(
        &mut self,
        meta: &PacketMeta,
        now_ms: u64,
        rng: &mut ChaCha8Rng,
    ) -> (u16, CounterClass) {
        if meta.is_rst {
            if let Some(sock) = meta.dest_socket {
                let borrowed = PacketMeta { socket_id: Some(sock), ..*meta };
                return self.draw_socket(&borrowed);
            }
            return self.draw_dest(meta.dst, now_ms, rng);
        }
        self.assign_mixed(meta, now_ms, rng)
    }

    fn draw_hash(&mut self, meta: &PacketMeta, now_ms: u64, rng: &mut ChaCha8Rng) -> (u16, CounterClass) {
        if meta.protocol == Protocol::Tcp {
            self.tcp_hash_draws += 1;
        }
        let idx = hash_counter_index(meta.src, meta.dst, meta.protocol, self.boot_key);
        let c = &mut self.hash_counters[idx];
        let ipid = c.value;
        let elapsed_ticks = now_ms / TICK_MS - c.last_used_ms / TICK_MS;
        let bound = elapsed_ticks.max(1);
        let step = rng.random_range(1..=bound) as u16;
        c.value = c.value.wrapping_add(step);
        c.last_used_ms = now_ms;
        (ipid, CounterClass::Hash(idx))
    }

    fn draw_socket(&mut self, meta: &PacketMeta) -> (u16, CounterClass) {
        let sock = meta
            .socket_id
            .expect("DF-set emission without socket context is a caller bug");
        // Lazily created so scoring can observe creation order; the base
        // value is folded out of the boot key rather than drawn, keeping
        // assignment independent of RNG call order.
        let value = self
            .socket_counters
            .entry(sock)
            .or_insert_with(|| (mix64(self.boot_key ^ sock.0) & 0xffff) as u16);
        let ipid = *value;
        *value = value.wrapping_add(1);
        (ipid, CounterClass::Socket(sock))
    }

    fn draw_dest(&mut self, dst: Ipv4Addr, now_ms: u64, rng: &mut ChaCha8Rng) -> (u16, CounterClass) {
        self.sweep_dest_counters(now_ms);
        let entry = self
            .dest_counters
            .entry(u32::from(dst))
            .or_insert_with(|| DestCounter { value: rng.random::<u16>(), last_used_ms: now_ms });
        let ipid = entry.value;
        entry.value = entry.value.wrapping_add(1);
        entry.last_used_ms = now_ms;
        (ipid, CounterClass::Destination(dst))
    }

    fn sweep_dest_counters(&mut self, now_ms: u64) {
        self.dest_counters
            .retain(|_, c| now_ms.saturating_sub(c.last_used_ms) <= DEST_COUNTER_IDLE_MS);
    }

    #[cfg(test)]
    pub(crate) fn force_hash_counter(&mut self, idx: usize, value: u16, last_used_ms: u64) {
        self.hash_counters[idx] = HashCounter { value, last_used_ms };
    }

    #[cfg(test)]
    pub(crate) fn force_socket_counter(&mut self, sock: SocketId, value: u16) {
        self.socket_counters.insert(sock, value);
    }

    #[cfg(test)]
    pub(crate) fn dest_counter_count(&self) -> usize {
        self.dest_counters.len()
    }
}
