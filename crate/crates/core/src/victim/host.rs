//! Simulation hosts: the victim server (full stack: IPID assignment, PMTUD
//! route cache, ICMP handling, TCP endpoint) and a benign client that opens
//! and uses a connection to it.

use std::collections::VecDeque;
use std::net::Ipv4Addr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::net::packet::{IcmpMessage, Packet, PacketBody, TcpFlags, TcpSegment};
use crate::net::sim::{HostOutbox, ReactiveHost};
use crate::victim::endpoint::{Endpoint, EndpointConfig, FourTuple, TcpReaction};
use crate::victim::ipid::{IpidAssigner, PacketMeta, PolicyVariant, SocketId};
use crate::victim::pmtud::{
    handle_frag_needed, EchoReplyLog, FragNeededOutcome, PmtudConfig, RouteCache,
};

/// Server host under attack. Implements the observable behaviours end to
/// end: every emitted packet gets its IPID from the policy under test, its
/// DF bit from the per-destination route cache, and its TCP disposition
/// from the endpoint's segment table.
pub struct VictimHost {
    addr: Ipv4Addr,
    endpoint: Endpoint,
    assigner: IpidAssigner,
    routes: RouteCache,
    pmtud: PmtudConfig,
    echo_log: EchoReplyLog,
    rng: ChaCha8Rng,
}

impl VictimHost {
    #[must_use]
    pub fn new(
        addr: Ipv4Addr,
        policy: PolicyVariant,
        endpoint_cfg: EndpointConfig,
        pmtud: PmtudConfig,
        mut rng: ChaCha8Rng,
    ) -> VictimHost {
        let assigner = IpidAssigner::new(policy, &mut rng);
        VictimHost {
            addr,
            endpoint: Endpoint::new(endpoint_cfg),
            assigner,
            routes: RouteCache::default(),
            pmtud,
            echo_log: EchoReplyLog::default(),
            rng,
        }
    }

    #[must_use]
    pub fn addr(&self) -> Ipv4Addr {
        self.addr
    }

    #[must_use]
    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    #[must_use]
    pub fn endpoint_mut(&mut self) -> &mut Endpoint {
        &mut self.endpoint
    }

    #[must_use]
    pub fn assigner(&self) -> &IpidAssigner {
        &self.assigner
    }

    #[must_use]
    pub fn routes(&self) -> &RouteCache {
        &self.routes
    }

    pub fn routes_mut(&mut self) -> &mut RouteCache {
        &mut self.routes
    }

    /// Direct connection install for scenario setup without a handshake.
    pub fn install_established(
        &mut self,
        tuple: FourTuple,
        iss: u32,
        rcv_nxt: u32,
        snd_una: u32,
        snd_nxt: u32,
    ) -> SocketId {
        self.endpoint.install_established(tuple, iss, rcv_nxt, snd_una, snd_nxt)
    }

    fn send_tcp(
        &mut self,
        out: &mut HostOutbox,
        now_ms: u64,
        dst: Ipv4Addr,
        seg: TcpSegment,
        socket_id: Option<SocketId>,
    ) {
        let meta = PacketMeta {
            src: self.addr,
            dst,
            protocol: crate::net::packet::Protocol::Tcp,
            df: self.routes.df_for(dst),
            is_rst: seg.flags.is_rst(),
            is_syn_ack: seg.flags.is_syn_ack(),
            socket_id,
            dest_socket: self.endpoint.socket_toward(dst),
        };
        let (ipid, _class) = self.assigner.assign(&meta, now_ms, &mut self.rng);
        out.send(Packet::tcp(self.addr, dst, ipid, meta.df, seg));
    }

    fn send_echo_reply(&mut self, out: &mut HostOutbox, now_ms: u64, dst: Ipv4Addr, id: u16, seqno: u16) {
        // Echo replies go out fragmentation-friendly (no DF), so they sample
        // the same counters a downgraded TCP flow uses.
        let meta = PacketMeta {
            src: self.addr,
            dst,
            protocol: crate::net::packet::Protocol::Icmp,
            df: false,
            is_rst: false,
            is_syn_ack: false,
            socket_id: None,
            dest_socket: self.endpoint.socket_toward(dst),
        };
        let (ipid, _class) = self.assigner.assign(&meta, now_ms, &mut self.rng);
        self.echo_log.record(dst, id, seqno);
        out.send(Packet::icmp(self.addr, dst, ipid, false, IcmpMessage::EchoReply { id, seqno }));
    }

    fn conn_ack_segment(&self, tuple: &FourTuple) -> (TcpSegment, SocketId) {
        let conn = self.endpoint.conn(tuple).expect("reaction references a live connection");
        let win = conn.rcv_wnd.min(65_535) as u16;
        let mut seg =
            TcpSegment::new(tuple.local_port, tuple.peer_port, conn.snd_nxt, conn.rcv_nxt, TcpFlags::ACK);
        seg.window = win;
        (seg, conn.socket_id)
    }

    fn apply_reaction(&mut self, out: &mut HostOutbox, now_ms: u64, src: Ipv4Addr, reaction: TcpReaction) {
        match reaction {
            TcpReaction::SynAck(tuple) => {
                let conn = self.endpoint.conn(&tuple).expect("embryo exists");
                let mut seg = TcpSegment::new(
                    tuple.local_port,
                    tuple.peer_port,
                    conn.iss,
                    conn.rcv_nxt,
                    TcpFlags::SYN | TcpFlags::ACK,
                );
                seg.window = conn.rcv_wnd.min(65_535) as u16;
                let socket = conn.socket_id;
                self.send_tcp(out, now_ms, tuple.peer_addr, seg, Some(socket));
            }
            TcpReaction::RstReply { to_addr, to_port, local_port, seq } => {
                let seg = TcpSegment::new(local_port, to_port, seq, 0, TcpFlags::RST);
                self.send_tcp(out, now_ms, to_addr, seg, None);
            }
            TcpReaction::ChallengeAck(tuple)
            | TcpReaction::DupAck(tuple)
            | TcpReaction::DataAck(tuple) => {
                let (seg, socket) = self.conn_ack_segment(&tuple);
                self.send_tcp(out, now_ms, tuple.peer_addr, seg, Some(socket));
            }
            TcpReaction::ConnectionAborted(tuple) => {
                out.note(format!("conn-aborted {}:{}", tuple.peer_addr, tuple.peer_port));
            }
            TcpReaction::ChallengeSuppressed(label) => {
                out.note(format!("challenge-suppressed {label} from {src}"));
            }
            TcpReaction::Dropped(label) => {
                out.note(format!("drop {label} from {src}"));
            }
            TcpReaction::Accepted(_) => {}
        }
    }
}

impl ReactiveHost for VictimHost {
    fn handle_packet(&mut self, pkt: &Packet, now_ms: u64, out: &mut HostOutbox) {
        let src = pkt.header.src;
        match &pkt.body {
            PacketBody::Tcp(seg) => {
                let seg = seg.clone();
                let reaction = self.endpoint.handle_tcp_segment(src, &seg, now_ms, &mut self.rng);
                self.apply_reaction(out, now_ms, src, reaction);
            }
            PacketBody::Icmp(IcmpMessage::EchoRequest { id, seqno }) => {
                let (id, seqno) = (*id, *seqno);
                self.send_echo_reply(out, now_ms, src, id, seqno);
            }
            PacketBody::Icmp(IcmpMessage::EchoReply { .. }) => {
                out.note(format!("drop unsolicited-echo-reply from {src}"));
            }
            PacketBody::Icmp(IcmpMessage::FragNeeded { next_hop_mtu, embedded }) => {
                let outcome = handle_frag_needed(
                    &mut self.routes,
                    &self.pmtud,
                    &self.echo_log,
                    self.addr,
                    *next_hop_mtu,
                    embedded,
                );
                match outcome {
                    FragNeededOutcome::Downgraded { dst } => {
                        out.note(format!("pmtud df-cleared toward {dst}"));
                    }
                    FragNeededOutcome::PmtuAdjusted { dst, pmtu } => {
                        out.note(format!("pmtud {dst} pmtu={pmtu}"));
                    }
                    FragNeededOutcome::Discarded(reason) => {
                        out.note(format!("drop frag-needed {reason:?} from {src}"));
                    }
                }
            }
        }
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn std::any::Any {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientState {
    Idle,
    SynSent,
    Established,
    Closed,
}

/// Timer token that makes the client start its handshake.
pub const CLIENT_TIMER_CONNECT: u64 = 0;
/// Timer token that makes the client send its next queued payload.
pub const CLIENT_TIMER_SEND: u64 = 1;

/// Legitimate client of the victim server. Procedurally dumb on purpose:
/// it connects, sends queued payloads when told to, and records whether an
/// exact-sequence RST killed its connection.
pub struct ClientHost {
    addr: Ipv4Addr,
    server: Ipv4Addr,
    server_port: u16,
    local_port: u16,
    iss: u32,
    snd_una: u32,
    snd_nxt: u32,
    rcv_nxt: u32,
    state: ClientState,
    ipid: u16,
    pending: VecDeque<Vec<u8>>,
    delivered: Vec<u8>,
}

impl ClientHost {
    #[must_use]
    pub fn new(
        addr: Ipv4Addr,
        server: Ipv4Addr,
        server_port: u16,
        local_port: u16,
        rng: &mut ChaCha8Rng,
    ) -> ClientHost {
        ClientHost {
            addr,
            server,
            server_port,
            local_port,
            iss: rng.random(),
            snd_una: 0,
            snd_nxt: 0,
            rcv_nxt: 0,
            state: ClientState::Idle,
            ipid: rng.random(),
            pending: VecDeque::new(),
            delivered: Vec::new(),
        }
    }

    #[must_use]
    pub fn state(&self) -> ClientState {
        self.state
    }

    #[must_use]
    pub fn local_port(&self) -> u16 {
        self.local_port
    }

    /// Payload the server acknowledged back to us (by advancing its ack).
    #[must_use]
    pub fn acked_bytes(&self) -> u32 {
        self.snd_una.wrapping_sub(self.iss.wrapping_add(1))
    }

    #[must_use]
    pub fn delivered(&self) -> &[u8] {
        &self.delivered
    }

    pub fn queue_payload(&mut self, data: Vec<u8>) {
        self.pending.push_back(data);
    }

    fn send(&mut self, out: &mut HostOutbox, seg: TcpSegment) {
        let ipid = self.ipid;
        self.ipid = self.ipid.wrapping_add(1);
        out.send(Packet::tcp(self.addr, self.server, ipid, true, seg));
    }
}

impl ReactiveHost for ClientHost {
    fn handle_packet(&mut self, pkt: &Packet, _now_ms: u64, out: &mut HostOutbox) {
        let Some(seg) = pkt.tcp_segment() else { return };
        if pkt.header.src != self.server
            || seg.dport != self.local_port
            || seg.sport != self.server_port
        {
            return; // stray traffic (e.g. reflected resets from spoofed probes)
        }
        let seg = seg.clone();
        match self.state {
            ClientState::SynSent if seg.flags.is_syn_ack() && seg.ack == self.iss.wrapping_add(1) => {
                self.rcv_nxt = seg.seq.wrapping_add(1);
                self.snd_una = seg.ack;
                self.snd_nxt = seg.ack;
                self.state = ClientState::Established;
                let ack =
                    TcpSegment::new(self.local_port, self.server_port, self.snd_nxt, self.rcv_nxt, TcpFlags::ACK);
                self.send(out, ack);
            }
            ClientState::Established if seg.flags.is_rst() => {
                if seg.seq == self.rcv_nxt {
                    self.state = ClientState::Closed;
                    out.note("client-conn-reset".to_string());
                }
            }
            ClientState::Established if seg.flags.is_ack() && !seg.flags.is_syn() => {
                // accept forward progress on our own data
                let advanced = seg.ack.wrapping_sub(self.snd_una);
                if advanced <= self.snd_nxt.wrapping_sub(self.snd_una) {
                    self.snd_una = seg.ack;
                }
                if !seg.payload.is_empty() && seg.seq == self.rcv_nxt {
                    self.delivered.extend_from_slice(&seg.payload);
                    self.rcv_nxt = self.rcv_nxt.wrapping_add(seg.payload.len() as u32);
                    let ack = TcpSegment::new(
                        self.local_port,
                        self.server_port,
                        self.snd_nxt,
                        self.rcv_nxt,
                        TcpFlags::ACK,
                    );
                    self.send(out, ack);
                }
            }
            _ => {}
        }
    }

    fn handle_timer(&mut self, token: u64, _now_ms: u64, out: &mut HostOutbox) {
        match token {
            CLIENT_TIMER_CONNECT if self.state == ClientState::Idle => {
                self.state = ClientState::SynSent;
                self.snd_una = self.iss;
                self.snd_nxt = self.iss.wrapping_add(1);
                let syn = TcpSegment::new(self.local_port, self.server_port, self.iss, 0, TcpFlags::SYN);
                self.send(out, syn);
            }
            CLIENT_TIMER_SEND if self.state == ClientState::Established => {
                if let Some(data) = self.pending.pop_front() {
                    let len = data.len() as u32;
                    let seg = TcpSegment::new(
                        self.local_port,
                        self.server_port,
                        self.snd_nxt,
                        self.rcv_nxt,
                        TcpFlags::ACK | TcpFlags::PSH,
                    )
                    .with_payload(data);
                    self.snd_nxt = self.snd_nxt.wrapping_add(len);
                    self.send(out, seg);
                }
            }
            _ => {}
        }
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn std::any::Any {
        self
    }
}
