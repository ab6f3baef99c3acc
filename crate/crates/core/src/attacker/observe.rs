//! IPID observation through paced echo requests.
//!
//! The victim's shared counters advance by exactly +1 per use as long as
//! consecutive uses stay within one system tick; an echo request every few
//! milliseconds therefore turns a counter into a linear sequence, and any
//! victim-originated packet drawn from the same counter shows up as a
//! surplus increment between two echo replies. One caveat drives the API:
//! the increment applied at a use is sized by the idle gap *before* that
//! use, so the first delta after a cold start is garbage — streams send a
//! warm-up echo and measurements only ever start at sample index 1.

use std::net::Ipv4Addr;

use crate::attacker::{AttackerIo, Pacer};
use crate::net::packet::{IcmpMessage, Packet, PacketBody};

/// One probe slot of a linearized stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IpidSample {
    pub send_time_ms: u64,
    pub seqno: u64,
    /// Reply IPID; `None` while outstanding or lost.
    pub ipid: Option<u16>,
}

/// Result of an `observe_linearized` run: the time-ordered samples plus the
/// positions where the stream jumped by two or more.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IpidObservation {
    pub samples: Vec<IpidSample>,
    /// Indices `i` such that `samples[i+1].ipid - samples[i].ipid >= 2`.
    pub gaps: Vec<usize>,
    /// Indices of samples with no reply.
    pub missing: Vec<usize>,
}

impl IpidObservation {
    #[must_use]
    pub fn has_ambiguity(&self) -> bool {
        !self.missing.is_empty()
    }
}

/// Continuous paced echo stream from one attacker-owned source address.
pub struct ObservationStream {
    src: Ipv4Addr,
    dst: Ipv4Addr,
    icmp_id: u16,
    pace: Pacer,
    sent_at: Vec<u64>,
    values: Vec<Option<u16>>,
}

impl ObservationStream {
    /// Open a stream and immediately send the warm-up echo (sample 0).
    pub fn begin(io: &mut AttackerIo<'_>, src: Ipv4Addr, dst: Ipv4Addr, icmp_id: u16, interval_ms: u64) -> ObservationStream {
        assert!(interval_ms >= 1 && interval_ms <= 10, "echo cadence must stay within one tick");
        let rate = (1000 / interval_ms) as u32;
        let mut stream = ObservationStream {
            src,
            dst,
            icmp_id,
            pace: Pacer::new(io.now(), rate),
            sent_at: Vec::new(),
            values: Vec::new(),
        };
        let t = stream.pace.take();
        io.advance_to(t);
        stream.send_echo(io);
        stream
    }

    #[must_use]
    pub fn src(&self) -> Ipv4Addr {
        self.src
    }

    fn send_echo(&mut self, io: &mut AttackerIo<'_>) {
        let seqno = self.sent_at.len() as u64;
        self.sent_at.push(io.now());
        self.values.push(None);
        io.send(Packet::icmp(
            self.src,
            self.dst,
            0,
            false,
            IcmpMessage::EchoRequest { id: self.icmp_id, seqno: (seqno % 65_536) as u16 },
        ));
    }

    /// Feed one received packet into the stream; returns true if consumed.
    pub fn accept(&mut self, pkt: &Packet) -> bool {
        let PacketBody::Icmp(IcmpMessage::EchoReply { id, seqno }) = pkt.body else {
            return false;
        };
        if id != self.icmp_id || pkt.header.dst != self.src {
            return false;
        }
        // map the 16-bit wire seqno back to the most recent matching index
        let total = self.values.len();
        let mut idx = None;
        let mut k = total;
        while k > 0 {
            k -= 1;
            if (k % 65_536) as u16 == seqno {
                idx = Some(k);
                break;
            }
            if total - k > 70_000 {
                break;
            }
        }
        if let Some(k) = idx {
            self.values[k] = Some(pkt.header.ipid);
            true
        } else {
            false
        }
    }

    fn drain(&mut self, io: &mut AttackerIo<'_>) {
        for (_, pkt) in io.poll() {
            self.accept(&pkt);
        }
    }

    /// Drive the simulation to `t`, keeping the echo cadence alive and
    /// collecting replies on the way.
    pub fn pump_until(&mut self, io: &mut AttackerIo<'_>, t: u64) {
        while self.pace.peek() <= t {
            let slot = self.pace.take();
            io.advance_to(slot);
            self.send_echo(io);
            self.drain(io);
        }
        io.advance_to(t);
        self.drain(io);
    }

    /// Pump until at least one more echo has been sent (a fresh cut point
    /// after whatever was just sent), returning its index.
    pub fn pump_one_echo(&mut self, io: &mut AttackerIo<'_>) -> u64 {
        let target = self.sent_at.len() as u64;
        let next = self.pace.peek();
        self.pump_until(io, next);
        debug_assert!(self.sent_at.len() as u64 > target);
        target
    }

    /// Index of the most recently sent echo.
    #[must_use]
    pub fn last_sent(&self) -> u64 {
        self.sent_at.len() as u64 - 1
    }

    #[must_use]
    pub fn value(&self, seqno: u64) -> Option<u16> {
        self.values.get(seqno as usize).copied().flatten()
    }

    #[must_use]
    pub fn sent_time(&self, seqno: u64) -> u64 {
        self.sent_at[seqno as usize]
    }

    /// Victim-side counter uses between echoes `a` and `b` beyond the echoes
    /// themselves. `None` until every reply in `[a-1, b]` is in — a hole in
    /// the span means a lost echo request (the victim ticked one time fewer
    /// than the index arithmetic assumes) or a lost reply (indistinguishable
    /// from the former), so the surplus cannot be trusted either way.
    /// Sample `a-1` matters because the reported IPID is the counter value
    /// *before* its randomized step: the step drawn at `a` lands in this
    /// span's delta, and it is only pinned to +1 when `a`'s predecessor kept
    /// the counter busy within the previous tick.
    /// `a` must be at least 1: the surplus at the warm-up echo reflects the
    /// counter's idle backlog, not traffic.
    #[must_use]
    pub fn extra_between(&self, a: u64, b: u64) -> Option<i64> {
        assert!(a >= 1, "sample 0 is the warm-up; deltas from it are meaningless");
        assert!(b > a);
        if (a - 1..=b).any(|i| self.value(i).is_none()) {
            return None;
        }
        let va = self.value(a)?;
        let vb = self.value(b)?;
        let advance = i64::from(vb.wrapping_sub(va));
        Some(advance - (b - a) as i64)
    }

    /// Pump until the replies for all echoes in `[a, b]` arrived or
    /// `deadline` passed; then report `extra_between`.
    pub fn settle_extra(
        &mut self,
        io: &mut AttackerIo<'_>,
        a: u64,
        b: u64,
        deadline: u64,
    ) -> Option<i64> {
        while io.now() < deadline {
            if self.value(a).is_some() && self.value(b).is_some() {
                break;
            }
            let step = (io.now() + 4).min(deadline);
            self.pump_until(io, step);
        }
        self.extra_between(a, b)
    }

    /// Re-anchor the cadence if the caller advanced time without pumping.
    pub fn realign(&mut self, now: u64) {
        self.pace.realign(now);
    }
}

/// Send `n_probes` echo requests at `rate_pps` (after one warm-up probe)
/// and report the reply stream with gap annotations.
pub fn observe_linearized(
    io: &mut AttackerIo<'_>,
    src: Ipv4Addr,
    dst: Ipv4Addr,
    icmp_id: u16,
    n_probes: usize,
    rate_pps: u32,
) -> IpidObservation {
    assert!(rate_pps > 0);
    let interval = (1000 / rate_pps.max(1)) as u64;
    let mut pace = Pacer::new(io.now(), rate_pps);
    let mut sent: Vec<(u64, u16)> = Vec::new();
    let mut values: Vec<Option<u16>> = vec![None; n_probes + 1];

    for k in 0..=n_probes {
        let t = pace.take();
        io.advance_to(t);
        let seqno = k as u16;
        sent.push((io.now(), seqno));
        io.send(Packet::icmp(src, dst, 0, false, IcmpMessage::EchoRequest { id: icmp_id, seqno }));
        for (_, pkt) in io.poll() {
            record_reply(&pkt, src, icmp_id, &mut values);
        }
    }
    let deadline = io.now() + io.rtt() + interval.max(1) + 50;
    while io.now() < deadline && values.iter().any(Option::is_none) {
        io.advance(2);
        for (_, pkt) in io.poll() {
            record_reply(&pkt, src, icmp_id, &mut values);
        }
    }

    // drop the warm-up sample (index 0) from the reported stream
    let samples: Vec<IpidSample> = sent
        .iter()
        .skip(1)
        .map(|&(t, seqno)| IpidSample {
            send_time_ms: t,
            seqno: u64::from(seqno),
            ipid: values[seqno as usize],
        })
        .collect();
    let mut gaps = Vec::new();
    let mut missing = Vec::new();
    for i in 0..samples.len() {
        if samples[i].ipid.is_none() {
            missing.push(i);
        }
        if i + 1 < samples.len() {
            if let (Some(a), Some(b)) = (samples[i].ipid, samples[i + 1].ipid) {
                if b.wrapping_sub(a) >= 2 {
                    gaps.push(i);
                }
            }
        }
    }
    IpidObservation { samples, gaps, missing }
}

fn record_reply(pkt: &Packet, src: Ipv4Addr, icmp_id: u16, values: &mut [Option<u16>]) {
    if let PacketBody::Icmp(IcmpMessage::EchoReply { id, seqno }) = pkt.body {
        if id == icmp_id && pkt.header.dst == src {
            if let Some(slot) = values.get_mut(seqno as usize) {
                *slot = Some(pkt.header.ipid);
            }
        }
    }
}
