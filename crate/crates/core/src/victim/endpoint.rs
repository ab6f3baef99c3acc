//! Minimal TCP endpoint: listening ports, connection table, and the segment
//! dispositions that matter for off-path inference — challenge ACKs with
//! their rate limits, duplicate ACKs for old data (deliberately not rate
//! limited, mirroring Linux), reset handling, and in-order delivery.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use rand::Rng;

use crate::net::packet::TcpSegment;
use crate::net::seq::seq_in_window;
use crate::victim::ipid::SocketId;

/// Receive window advertised by every connection (Linux default buffer).
pub const DEFAULT_RCV_WND: u32 = 87_380;
/// Largest send window the peer has advertised; fixed at setup here.
pub const DEFAULT_SND_MAX_WND: u32 = 65_535;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EndpointConfig {
    pub listening_ports: BTreeSet<u16>,
    /// Reply with RST to a SYN/ACK that matches no connection (as opposed
    /// to dropping it silently).
    pub rst_on_unexpected_synack: bool,
    /// Per-connection minimum spacing between challenge ACKs.
    pub challenge_ack_interval_ms: u64,
    /// Global challenge ACKs allowed per wall-clock second; `None` disables
    /// the global cap.
    pub global_challenge_ack_per_sec: Option<u32>,
    pub rcv_wnd: u32,
    pub snd_max_wnd: u32,
}

impl Default for EndpointConfig {
    fn default() -> EndpointConfig {
        EndpointConfig {
            listening_ports: BTreeSet::new(),
            rst_on_unexpected_synack: true,
            challenge_ack_interval_ms: 500,
            global_challenge_ack_per_sec: Some(1000),
            rcv_wnd: DEFAULT_RCV_WND,
            snd_max_wnd: DEFAULT_SND_MAX_WND,
        }
    }
}

/// Connection identity from the local host's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct FourTuple {
    pub peer_addr: Ipv4Addr,
    pub peer_port: u16,
    pub local_port: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnPhase {
    /// SYN seen, SYN/ACK sent, waiting for the final ACK.
    SynReceived,
    Established,
}

#[derive(Debug, Clone)]
pub struct TcpConnState {
    pub tuple: FourTuple,
    pub phase: ConnPhase,
    /// Our initial send sequence number (SYN/ACK carries it).
    pub iss: u32,
    /// Next sequence number expected from the peer.
    pub rcv_nxt: u32,
    pub rcv_wnd: u32,
    /// Oldest unacknowledged sequence we sent.
    pub snd_una: u32,
    /// Next sequence we would send.
    pub snd_nxt: u32,
    /// Largest window the peer ever advertised.
    pub snd_max_wnd: u32,
    pub last_challenge_ack_ms: Option<u64>,
    pub socket_id: SocketId,
    /// In-order application data delivered on this connection.
    pub received: Vec<u8>,
}

impl TcpConnState {
    /// Ack value strictly above the acceptable range and below the wrap
    /// guard — i.e. inside the challenge window.
    #[must_use]
    pub fn ack_in_challenge_window(&self, ack: u32) -> bool {
        let back = self.snd_una.wrapping_sub(ack);
        back >= self.snd_max_wnd.wrapping_add(1) && back <= (1 << 31) - 1
    }

    /// `snd_una - snd_max_wnd <= ack <= snd_nxt` with wraparound.
    #[must_use]
    pub fn ack_acceptable(&self, ack: u32) -> bool {
        let lo = self.snd_una.wrapping_sub(self.snd_max_wnd);
        let size = self.snd_max_wnd.wrapping_add(self.snd_nxt.wrapping_sub(self.snd_una));
        seq_in_window(ack, lo, size)
    }

    /// Sequence strictly below the receive window ("old data").
    #[must_use]
    pub fn seq_below_window(&self, seq: u32) -> bool {
        let back = self.rcv_nxt.wrapping_sub(seq);
        back >= 1 && back < 1 << 31
    }

    #[must_use]
    pub fn seq_in_window(&self, seq: u32) -> bool {
        seq_in_window(seq, self.rcv_nxt, self.rcv_wnd)
    }
}

/// What the endpoint wants sent (or noted) in response to a segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TcpReaction {
    /// Segment dropped; the label says why (traced, nothing sent).
    Dropped(&'static str),
    /// Segment accepted silently (e.g. a pure ACK, or the handshake ACK).
    Accepted(&'static str),
    /// Send (or re-send) the SYN/ACK for this embryonic connection.
    SynAck(FourTuple),
    /// Send a bare RST answering an unexpected SYN/ACK.
    RstReply { to_addr: Ipv4Addr, to_port: u16, local_port: u16, seq: u32 },
    ChallengeAck(FourTuple),
    /// Old-data duplicate ACK; never rate limited.
    DupAck(FourTuple),
    /// Payload landed in order; ack the new data.
    DataAck(FourTuple),
    /// RST at exactly rcv_nxt tore the connection down (nothing sent).
    ConnectionAborted(FourTuple),
    /// A challenge ACK was due but the rate limiter suppressed it.
    ChallengeSuppressed(&'static str),
}

#[derive(Debug, Default)]
pub struct Endpoint {
    pub cfg: EndpointConfig,
    conns: BTreeMap<FourTuple, TcpConnState>,
    next_socket: u64,
    global_second: u64,
    global_sent_this_second: u32,
    pub challenge_acks_sent: u64,
    pub dup_acks_sent: u64,
}

impl Endpoint {
    #[must_use]
    pub fn new(cfg: EndpointConfig) -> Endpoint {
        Endpoint { cfg, ..Endpoint::default() }
    }

    #[must_use]
    pub fn conn(&self, tuple: &FourTuple) -> Option<&TcpConnState> {
        self.conns.get(tuple)
    }

    #[must_use]
    pub fn conn_mut(&mut self, tuple: &FourTuple) -> Option<&mut TcpConnState> {
        self.conns.get_mut(tuple)
    }

    pub fn conns(&self) -> impl Iterator<Item = &TcpConnState> {
        self.conns.values()
    }

    /// Live socket toward `dst`, if any (used by the RST destination-counter
    /// IPID policy to pick a counter for connectionless resets).
    #[must_use]
    pub fn socket_toward(&self, dst: Ipv4Addr) -> Option<SocketId> {
        self.conns
            .values()
            .find(|c| c.tuple.peer_addr == dst && c.phase == ConnPhase::Established)
            .map(|c| c.socket_id)
    }

    fn alloc_socket(&mut self) -> SocketId {
        let id = SocketId(self.next_socket);
        self.next_socket += 1;
        id
    }

    /// Install a fully established connection directly (scenario setup).
    pub fn install_established(
        &mut self,
        tuple: FourTuple,
        iss: u32,
        rcv_nxt: u32,
        snd_una: u32,
        snd_nxt: u32,
    ) -> SocketId {
        assert!(
            snd_nxt.wrapping_sub(snd_una) <= self.cfg.snd_max_wnd,
            "in-flight data larger than the peer window"
        );
        let socket_id = self.alloc_socket();
        let conn = TcpConnState {
            tuple,
            phase: ConnPhase::Established,
            iss,
            rcv_nxt,
            rcv_wnd: self.cfg.rcv_wnd,
            snd_una,
            snd_nxt,
            snd_max_wnd: self.cfg.snd_max_wnd,
            last_challenge_ack_ms: None,
            socket_id,
            received: Vec::new(),
        };
        self.conns.insert(tuple, conn);
        socket_id
    }

    /// Charge one challenge ACK against the per-connection and global
    /// limiters; only a `true` return updates either.
    fn challenge_ack_permitted(&mut self, tuple: &FourTuple, now_ms: u64) -> bool {
        let interval = self.cfg.challenge_ack_interval_ms;
        let global = self.cfg.global_challenge_ack_per_sec;
        let second = now_ms / 1000;
        if second != self.global_second {
            self.global_second = second;
            self.global_sent_this_second = 0;
        }
        if let Some(cap) = global {
            if self.global_sent_this_second >= cap {
                return false;
            }
        }
        let conn = self.conns.get_mut(tuple).expect("limiter charged for a live connection");
        if let Some(last) = conn.last_challenge_ack_ms {
            if now_ms.saturating_sub(last) < interval {
                return false;
            }
        }
        conn.last_challenge_ack_ms = Some(now_ms);
        self.global_sent_this_second += 1;
        self.challenge_acks_sent += 1;
        true
    }

    fn challenge_or_suppress(
        &mut self,
        tuple: FourTuple,
        now_ms: u64,
        label: &'static str,
    ) -> TcpReaction {
        if self.challenge_ack_permitted(&tuple, now_ms) {
            TcpReaction::ChallengeAck(tuple)
        } else {
            TcpReaction::ChallengeSuppressed(label)
        }
    }

    /// Dispatch one inbound segment. The caller turns the reaction into
    /// packets; connection state is already updated when this returns.
    pub fn handle_tcp_segment(
        &mut self,
        src: Ipv4Addr,
        seg: &TcpSegment,
        now_ms: u64,
        rng: &mut impl Rng,
    ) -> TcpReaction {
        let tuple =
            FourTuple { peer_addr: src, peer_port: seg.sport, local_port: seg.dport };
        let flags = seg.flags;

        if flags.is_syn() && !flags.is_ack() {
            // Plain SYN: open (or re-acknowledge) an embryonic connection on
            // a listening port; against an established connection it only
            // earns a challenge ACK, whatever its sequence claims.
            return match self.conns.get(&tuple).map(|c| c.phase) {
                Some(ConnPhase::Established) => {
                    self.challenge_or_suppress(tuple, now_ms, "syn-on-established")
                }
                Some(ConnPhase::SynReceived) => TcpReaction::SynAck(tuple),
                None if self.cfg.listening_ports.contains(&seg.dport) => {
                    let socket_id = self.alloc_socket();
                    let iss = rng.random::<u32>();
                    let conn = TcpConnState {
                        tuple,
                        phase: ConnPhase::SynReceived,
                        iss,
                        rcv_nxt: seg.seq.wrapping_add(1),
                        rcv_wnd: self.cfg.rcv_wnd,
                        snd_una: iss,
                        snd_nxt: iss.wrapping_add(1),
                        snd_max_wnd: self.cfg.snd_max_wnd,
                        last_challenge_ack_ms: None,
                        socket_id,
                        received: Vec::new(),
                    };
                    self.conns.insert(tuple, conn);
                    TcpReaction::SynAck(tuple)
                }
                None => TcpReaction::Dropped("syn-to-closed-port"),
            };
        }

        if flags.is_syn_ack() {
            return match self.conns.get(&tuple).map(|c| c.phase) {
                Some(ConnPhase::Established) => {
                    self.challenge_or_suppress(tuple, now_ms, "synack-on-established")
                }
                _ if self.cfg.rst_on_unexpected_synack => TcpReaction::RstReply {
                    to_addr: src,
                    to_port: seg.sport,
                    local_port: seg.dport,
                    seq: seg.ack,
                },
                _ => TcpReaction::Dropped("unexpected-synack"),
            };
        }

        if flags.is_rst() {
            let Some(conn) = self.conns.get(&tuple) else {
                return TcpReaction::Dropped("rst-no-connection");
            };
            if conn.phase != ConnPhase::Established {
                return TcpReaction::Dropped("rst-on-embryo");
            }
            if !conn.seq_in_window(seg.seq) {
                return TcpReaction::Dropped("rst-out-of-window");
            }
            if seg.seq == conn.rcv_nxt {
                self.conns.remove(&tuple);
                return TcpReaction::ConnectionAborted(tuple);
            }
            return self.challenge_or_suppress(tuple, now_ms, "rst-in-window");
        }

        if flags.is_ack() {
            let Some(conn) = self.conns.get_mut(&tuple) else {
                return TcpReaction::Dropped("ack-no-connection");
            };
            if conn.phase == ConnPhase::SynReceived {
                // Handshake completion: the ACK must point exactly at our
                // SYN/ACK for the embryo to graduate.
                if seg.seq == conn.rcv_nxt && seg.ack == conn.snd_nxt {
                    conn.phase = ConnPhase::Established;
                    conn.snd_una = conn.snd_nxt;
                    if !seg.payload.is_empty() {
                        conn.received.extend_from_slice(&seg.payload);
                        conn.rcv_nxt = conn.rcv_nxt.wrapping_add(seg.payload.len() as u32);
                        return TcpReaction::DataAck(tuple);
                    }
                    return TcpReaction::Accepted("handshake-complete");
                }
                return TcpReaction::Dropped("bad-handshake-ack");
            }

            if conn.seq_below_window(seg.seq) {
                // Old data always answers immediately; this path has no
                // rate limiter, which is exactly what makes it a usable
                // contrast against challenge-ACK suppression.
                self.dup_acks_sent += 1;
                return TcpReaction::DupAck(tuple);
            }
            if !conn.seq_in_window(seg.seq) {
                return TcpReaction::Dropped("seq-above-window");
            }
            if conn.ack_in_challenge_window(seg.ack) {
                return self.challenge_or_suppress(tuple, now_ms, "ack-too-old");
            }
            let conn = self.conns.get_mut(&tuple).expect("connection vanished");
            if !conn.ack_acceptable(seg.ack) {
                return TcpReaction::Dropped("ack-unacceptable");
            }
            let acked = seg.ack.wrapping_sub(conn.snd_una);
            if acked <= conn.snd_nxt.wrapping_sub(conn.snd_una) {
                conn.snd_una = seg.ack;
            }
            if !seg.payload.is_empty() && seg.seq == conn.rcv_nxt {
                conn.received.extend_from_slice(&seg.payload);
                conn.rcv_nxt = conn.rcv_nxt.wrapping_add(seg.payload.len() as u32);
                return TcpReaction::DataAck(tuple);
            }
            return TcpReaction::Accepted("ack-ok");
        }

        TcpReaction::Dropped("unhandled-segment")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::packet::TcpFlags;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const PEER: Ipv4Addr = Ipv4Addr::new(172, 16, 0, 9);
    const OTHER: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 7);

    fn endpoint_with_conn() -> (Endpoint, FourTuple, ChaCha8Rng) {
        let mut cfg = EndpointConfig::default();
        cfg.listening_ports.insert(22);
        let mut ep = Endpoint::new(cfg);
        let tuple = FourTuple { peer_addr: PEER, peer_port: 45_000, local_port: 22 };
        ep.install_established(tuple, 5_000, 1_000_000, 5_001, 5_001);
        (ep, tuple, ChaCha8Rng::seed_from_u64(7))
    }

    fn seg(sport: u16, dport: u16, seq: u32, ack: u32, flags: TcpFlags) -> TcpSegment {
        TcpSegment::new(sport, dport, seq, ack, flags)
    }

    #[test]
    fn syn_to_listening_port_opens_embryo_and_retransmits_same_isn() {
        let (mut ep, _, mut rng) = endpoint_with_conn();
        let syn = seg(50_000, 22, 42, 0, TcpFlags::SYN);
        assert!(matches!(ep.handle_tcp_segment(OTHER, &syn, 0, &mut rng), TcpReaction::SynAck(_)));
        let tuple = FourTuple { peer_addr: OTHER, peer_port: 50_000, local_port: 22 };
        let iss = ep.conn(&tuple).unwrap().iss;
        assert_eq!(ep.conn(&tuple).unwrap().rcv_nxt, 43);
        // duplicate SYN re-sends the same SYN/ACK rather than resetting state
        assert!(matches!(ep.handle_tcp_segment(OTHER, &syn, 5, &mut rng), TcpReaction::SynAck(_)));
        assert_eq!(ep.conn(&tuple).unwrap().iss, iss);
    }

    #[test]
    fn syn_to_closed_port_is_dropped() {
        let (mut ep, _, mut rng) = endpoint_with_conn();
        let syn = seg(50_000, 23, 42, 0, TcpFlags::SYN);
        assert_eq!(
            ep.handle_tcp_segment(OTHER, &syn, 0, &mut rng),
            TcpReaction::Dropped("syn-to-closed-port")
        );
    }

    #[test]
    fn syn_on_established_draws_challenge_ack_at_any_seq() {
        let (mut ep, tuple, mut rng) = endpoint_with_conn();
        for (i, wild_seq) in [0u32, 999_999_999, u32::MAX].iter().enumerate() {
            let syn = seg(tuple.peer_port, tuple.local_port, *wild_seq, 0, TcpFlags::SYN);
            let r = ep.handle_tcp_segment(PEER, &syn, (i as u64) * 1000, &mut rng);
            assert_eq!(r, TcpReaction::ChallengeAck(tuple), "seq={wild_seq}");
        }
    }

    #[test]
    fn unexpected_synack_draws_rst_echoing_its_ack_or_silence() {
        let (mut ep, _, mut rng) = endpoint_with_conn();
        let sa = seg(48_000, 22, 1, 77_777, TcpFlags::SYN | TcpFlags::ACK);
        match ep.handle_tcp_segment(OTHER, &sa, 0, &mut rng) {
            TcpReaction::RstReply { to_addr, to_port, local_port, seq } => {
                assert_eq!((to_addr, to_port, local_port, seq), (OTHER, 48_000, 22, 77_777));
            }
            other => panic!("expected RstReply, got {other:?}"),
        }
        ep.cfg.rst_on_unexpected_synack = false;
        assert_eq!(
            ep.handle_tcp_segment(OTHER, &sa, 1, &mut rng),
            TcpReaction::Dropped("unexpected-synack")
        );
    }

    #[test]
    fn synack_on_established_draws_challenge_ack() {
        let (mut ep, tuple, mut rng) = endpoint_with_conn();
        let sa = seg(tuple.peer_port, tuple.local_port, 9, 9, TcpFlags::SYN | TcpFlags::ACK);
        assert_eq!(ep.handle_tcp_segment(PEER, &sa, 0, &mut rng), TcpReaction::ChallengeAck(tuple));
    }

    #[test]
    fn rst_disposition_depends_on_exact_sequence() {
        let (mut ep, tuple, mut rng) = endpoint_with_conn();
        let rcv_nxt = ep.conn(&tuple).unwrap().rcv_nxt;

        let out = seg(tuple.peer_port, tuple.local_port, rcv_nxt.wrapping_sub(1), 0, TcpFlags::RST);
        assert_eq!(
            ep.handle_tcp_segment(PEER, &out, 0, &mut rng),
            TcpReaction::Dropped("rst-out-of-window")
        );

        let inw = seg(tuple.peer_port, tuple.local_port, rcv_nxt + 10, 0, TcpFlags::RST);
        assert_eq!(ep.handle_tcp_segment(PEER, &inw, 0, &mut rng), TcpReaction::ChallengeAck(tuple));
        assert!(ep.conn(&tuple).is_some(), "in-window inexact RST must not kill the connection");

        let exact = seg(tuple.peer_port, tuple.local_port, rcv_nxt, 0, TcpFlags::RST);
        assert_eq!(
            ep.handle_tcp_segment(PEER, &exact, 600, &mut rng),
            TcpReaction::ConnectionAborted(tuple)
        );
        assert!(ep.conn(&tuple).is_none());
    }

    #[test]
    fn rst_at_window_edge_is_out_of_window() {
        let (mut ep, tuple, mut rng) = endpoint_with_conn();
        let conn = ep.conn(&tuple).unwrap();
        let (rcv_nxt, wnd) = (conn.rcv_nxt, conn.rcv_wnd);
        // last in-window point is rcv_nxt + wnd; one past it is out
        let edge = seg(tuple.peer_port, tuple.local_port, rcv_nxt.wrapping_add(wnd), 0, TcpFlags::RST);
        assert_eq!(ep.handle_tcp_segment(PEER, &edge, 0, &mut rng), TcpReaction::ChallengeAck(tuple));
        let past = seg(tuple.peer_port, tuple.local_port, rcv_nxt.wrapping_add(wnd + 1), 0, TcpFlags::RST);
        assert_eq!(
            ep.handle_tcp_segment(PEER, &past, 1, &mut rng),
            TcpReaction::Dropped("rst-out-of-window")
        );
    }

    #[test]
    fn old_data_ack_is_never_rate_limited() {
        let (mut ep, tuple, mut rng) = endpoint_with_conn();
        let rcv_nxt = ep.conn(&tuple).unwrap().rcv_nxt;
        let snd_una = ep.conn(&tuple).unwrap().snd_una;
        for i in 0..40 {
            let s = seg(
                tuple.peer_port,
                tuple.local_port,
                rcv_nxt.wrapping_sub(10_000),
                snd_una,
                TcpFlags::ACK,
            );
            // all 40 land inside one 500 ms interval and every one answers
            assert_eq!(ep.handle_tcp_segment(PEER, &s, i * 10, &mut rng), TcpReaction::DupAck(tuple));
        }
        assert_eq!(ep.dup_acks_sent, 40);
    }

    #[test]
    fn challenge_ack_interval_suppresses_within_500ms() {
        let (mut ep, tuple, mut rng) = endpoint_with_conn();
        let rcv_nxt = ep.conn(&tuple).unwrap().rcv_nxt;
        let mk = |_i: u64| seg(tuple.peer_port, tuple.local_port, rcv_nxt + 5, 0, TcpFlags::RST);
        assert_eq!(ep.handle_tcp_segment(PEER, &mk(0), 0, &mut rng), TcpReaction::ChallengeAck(tuple));
        for i in 1..10 {
            assert_eq!(
                ep.handle_tcp_segment(PEER, &mk(i), i * 40, &mut rng),
                TcpReaction::ChallengeSuppressed("rst-in-window")
            );
        }
        // 500 ms after the first, the next one goes out
        assert_eq!(
            ep.handle_tcp_segment(PEER, &mk(99), 500, &mut rng),
            TcpReaction::ChallengeAck(tuple)
        );
        assert_eq!(ep.challenge_acks_sent, 2);
    }

    #[test]
    fn global_cap_bounds_challenge_acks_across_connections() {
        let mut cfg = EndpointConfig::default();
        cfg.listening_ports.insert(22);
        cfg.challenge_ack_interval_ms = 0; // isolate the global cap
        cfg.global_challenge_ack_per_sec = Some(1000);
        let mut ep = Endpoint::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tuples = Vec::new();
        for i in 0..4u16 {
            let t = FourTuple { peer_addr: PEER, peer_port: 40_000 + i, local_port: 22 };
            ep.install_established(t, 100, 1_000, 101, 101);
            tuples.push(t);
        }
        // 2000 triggers within one second: exactly the budget goes out
        let mut sent = 0;
        for i in 0..2000u64 {
            let t = tuples[(i % 4) as usize];
            let s = seg(t.peer_port, t.local_port, 1_000 + 5, 0, TcpFlags::RST);
            match ep.handle_tcp_segment(PEER, &s, i / 2, &mut rng) {
                TcpReaction::ChallengeAck(_) => sent += 1,
                TcpReaction::ChallengeSuppressed(_) => {}
                other => panic!("unexpected {other:?}"),
            }
        }
        assert_eq!(sent, 1000);
        assert_eq!(ep.challenge_acks_sent, 1000);
        // the window rolls over: budget refreshes in the next second
        let t = tuples[0];
        let s = seg(t.peer_port, t.local_port, 1_000 + 5, 0, TcpFlags::RST);
        assert_eq!(ep.handle_tcp_segment(PEER, &s, 1_000, &mut rng), TcpReaction::ChallengeAck(t));
    }

    #[test]
    fn disabled_global_cap_still_honours_per_connection_interval() {
        let mut cfg = EndpointConfig::default();
        cfg.global_challenge_ack_per_sec = None;
        let mut ep = Endpoint::new(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = FourTuple { peer_addr: PEER, peer_port: 40_000, local_port: 22 };
        ep.install_established(t, 100, 1_000, 101, 101);
        let s = seg(t.peer_port, t.local_port, 1_005, 0, TcpFlags::RST);
        assert_eq!(ep.handle_tcp_segment(PEER, &s, 0, &mut rng), TcpReaction::ChallengeAck(t));
        assert_eq!(
            ep.handle_tcp_segment(PEER, &s, 100, &mut rng),
            TcpReaction::ChallengeSuppressed("rst-in-window")
        );
    }

    #[test]
    fn ack_in_challenge_window_vs_acceptable_vs_invalid() {
        let (mut ep, tuple, mut rng) = endpoint_with_conn();
        let conn = ep.conn(&tuple).unwrap();
        let (rcv_nxt, snd_una, wnd) = (conn.rcv_nxt, conn.snd_una, conn.snd_max_wnd);

        // too-old ack: one past the acceptable range on the stale side
        let stale = seg(
            tuple.peer_port,
            tuple.local_port,
            rcv_nxt,
            snd_una.wrapping_sub(wnd + 1),
            TcpFlags::ACK,
        );
        assert_eq!(ep.handle_tcp_segment(PEER, &stale, 0, &mut rng), TcpReaction::ChallengeAck(tuple));

        // boundary: exactly snd_una - snd_max_wnd is still acceptable
        let boundary = seg(
            tuple.peer_port,
            tuple.local_port,
            rcv_nxt,
            snd_una.wrapping_sub(wnd),
            TcpFlags::ACK,
        );
        assert_eq!(
            ep.handle_tcp_segment(PEER, &boundary, 600, &mut rng),
            TcpReaction::Accepted("ack-ok")
        );

        // far-future ack (beyond snd_nxt but under the wrap guard): dropped
        let future = seg(
            tuple.peer_port,
            tuple.local_port,
            rcv_nxt,
            snd_una.wrapping_add(1_000_000),
            TcpFlags::ACK,
        );
        assert_eq!(
            ep.handle_tcp_segment(PEER, &future, 1200, &mut rng),
            TcpReaction::Dropped("ack-unacceptable")
        );
    }

    #[test]
    fn in_order_payload_advances_rcv_nxt_and_feeds_the_sink() {
        let (mut ep, tuple, mut rng) = endpoint_with_conn();
        let (rcv_nxt, snd_una) = {
            let c = ep.conn(&tuple).unwrap();
            (c.rcv_nxt, c.snd_una)
        };
        let data = seg(tuple.peer_port, tuple.local_port, rcv_nxt, snd_una, TcpFlags::ACK | TcpFlags::PSH)
            .with_payload(b"hello".to_vec());
        assert_eq!(ep.handle_tcp_segment(PEER, &data, 0, &mut rng), TcpReaction::DataAck(tuple));
        let c = ep.conn(&tuple).unwrap();
        assert_eq!(c.received, b"hello");
        assert_eq!(c.rcv_nxt, rcv_nxt.wrapping_add(5));

        // replaying the same segment is now old data: dup-ACK, sink untouched
        assert_eq!(ep.handle_tcp_segment(PEER, &data, 1, &mut rng), TcpReaction::DupAck(tuple));
        assert_eq!(ep.conn(&tuple).unwrap().received, b"hello");
    }

    #[test]
    fn out_of_order_payload_is_not_delivered() {
        let (mut ep, tuple, mut rng) = endpoint_with_conn();
        let (rcv_nxt, snd_una) = {
            let c = ep.conn(&tuple).unwrap();
            (c.rcv_nxt, c.snd_una)
        };
        let data = seg(
            tuple.peer_port,
            tuple.local_port,
            rcv_nxt.wrapping_add(100),
            snd_una,
            TcpFlags::ACK | TcpFlags::PSH,
        )
        .with_payload(b"later".to_vec());
        assert_eq!(ep.handle_tcp_segment(PEER, &data, 0, &mut rng), TcpReaction::Accepted("ack-ok"));
        let c = ep.conn(&tuple).unwrap();
        assert!(c.received.is_empty());
        assert_eq!(c.rcv_nxt, rcv_nxt);
    }

    #[test]
    fn handshake_ack_promotes_embryo() {
        let (mut ep, _, mut rng) = endpoint_with_conn();
        let syn = seg(50_000, 22, 42, 0, TcpFlags::SYN);
        ep.handle_tcp_segment(OTHER, &syn, 0, &mut rng);
        let tuple = FourTuple { peer_addr: OTHER, peer_port: 50_000, local_port: 22 };
        let (iss, rcv_nxt) = {
            let c = ep.conn(&tuple).unwrap();
            (c.iss, c.rcv_nxt)
        };
        let ack = seg(50_000, 22, rcv_nxt, iss.wrapping_add(1), TcpFlags::ACK);
        assert_eq!(
            ep.handle_tcp_segment(OTHER, &ack, 20, &mut rng),
            TcpReaction::Accepted("handshake-complete")
        );
        let c = ep.conn(&tuple).unwrap();
        assert_eq!(c.phase, ConnPhase::Established);
        assert_eq!(c.snd_una, iss.wrapping_add(1));
    }

    #[test]
    fn fin_only_segments_are_ignored() {
        let (mut ep, tuple, mut rng) = endpoint_with_conn();
        let fin = seg(tuple.peer_port, tuple.local_port, 0, 0, TcpFlags::FIN);
        assert_eq!(
            ep.handle_tcp_segment(PEER, &fin, 0, &mut rng),
            TcpReaction::Dropped("unhandled-segment")
        );
    }
}
