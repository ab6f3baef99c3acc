//! Single-threaded discrete-event engine.
//!
//! Virtual time is integer milliseconds. Events are totally ordered by
//! `(fire_time, seqno)` where `seqno` is the scheduling order, so ties are
//! broken deterministically and a replay with the same config and seed pops
//! events in exactly the same order.
//!
//! Hosts come in two shapes: reactive hosts (server, client) that are called
//! back on delivery and may emit response packets in the same millisecond,
//! and mailbox hosts (the attacker) whose deliveries are queued for a driver
//! that advances the clock explicitly. Routing is strictly by destination
//! address ownership; a host never sees a packet addressed to someone else,
//! which is what makes the attacker off-path.

use std::any::Any;
use std::cmp::Ordering;
use std::collections::{BinaryHeap, BTreeMap};
use std::net::Ipv4Addr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::packet::Packet;
use super::trace::{Direction, Trace};

/// Index of a host inside one simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HostId(usize);

impl HostId {
    #[must_use]
    pub const fn raw(self) -> usize {
        self.0
    }
}

/// Directed link properties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    pub latency_ms: u64,
    pub loss_rate: f64,
    /// Whether the link forwards packets whose source address is not owned
    /// by the sending host (models the ingress-filtering deployment gap).
    pub spoofing_permitted: bool,
}

impl Default for LinkModel {
    fn default() -> LinkModel {
        LinkModel { latency_ms: 10, loss_rate: 0.0, spoofing_permitted: true }
    }
}

/// What an event does when it fires.
#[derive(Debug, Clone)]
pub enum EventAction {
    Deliver { packet: Packet, host: HostId },
    Timer { host: HostId, token: u64 },
}

/// A scheduled event; `seqno` breaks fire-time ties in scheduling order.
#[derive(Debug, Clone)]
pub struct Event {
    pub fire_time: u64,
    pub seqno: u64,
    pub action: EventAction,
}

impl PartialEq for Event {
    fn eq(&self, other: &Event) -> bool {
        self.fire_time == other.fire_time && self.seqno == other.seqno
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Event) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the std max-heap pops the earliest (fire_time, seqno).
    fn cmp(&self, other: &Event) -> Ordering {
        other
            .fire_time
            .cmp(&self.fire_time)
            .then_with(|| other.seqno.cmp(&self.seqno))
    }
}

/// Response packets and audit notes a reactive host produces for one input.
#[derive(Debug, Default)]
pub struct HostOutbox {
    pub packets: Vec<Packet>,
    pub notes: Vec<String>,
}

impl HostOutbox {
    pub fn send(&mut self, pkt: Packet) {
        self.packets.push(pkt);
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }
}

/// A host that reacts to deliveries and timers.
pub trait ReactiveHost: Any {
    fn handle_packet(&mut self, pkt: &Packet, now: u64, out: &mut HostOutbox);
    fn handle_timer(&mut self, _token: u64, _now: u64, _out: &mut HostOutbox) {}
    fn as_any(&self) -> &dyn Any;
    fn as_any_mut(&mut self) -> &mut dyn Any;
}

/// Address ownership: explicit addresses plus contiguous blocks.
#[derive(Debug, Clone, Default)]
pub struct AddrSet {
    singles: Vec<Ipv4Addr>,
    blocks: Vec<(u32, u32)>, // (base, count)
}

impl AddrSet {
    #[must_use]
    pub fn single(addr: Ipv4Addr) -> AddrSet {
        AddrSet { singles: vec![addr], blocks: Vec::new() }
    }

    pub fn add_block(&mut self, base: Ipv4Addr, count: u32) {
        self.blocks.push((u32::from(base), count));
    }

    #[must_use]
    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        let v = u32::from(addr);
        self.singles.iter().any(|a| *a == addr)
            || self.blocks.iter().any(|(base, count)| v >= *base && v - *base < *count)
    }
}

enum HostNode {
    Reactive(Box<dyn ReactiveHost>),
    Mailbox(Vec<(u64, Packet)>),
}

struct HostSlot {
    label: String,
    addrs: AddrSet,
    node: HostNode,
}

/// Per-host packet counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HostCounters {
    pub tx: u64,
    pub rx: u64,
}

pub struct Simulation {
    now: u64,
    next_seqno: u64,
    events: BinaryHeap<Event>,
    hosts: Vec<HostSlot>,
    links: BTreeMap<(usize, usize), LinkModel>,
    default_link: LinkModel,
    loss_rng: ChaCha8Rng,
    trace: Trace,
    counters: Vec<HostCounters>,
    lost: u64,
    spoof_filtered: u64,
    undeliverable: u64,
}

impl Simulation {
    #[must_use]
    pub fn new(loss_rng: ChaCha8Rng, trace_enabled: bool) -> Simulation {
        Simulation {
            now: 0,
            next_seqno: 0,
            events: BinaryHeap::new(),
            hosts: Vec::new(),
            links: BTreeMap::new(),
            default_link: LinkModel::default(),
            loss_rng,
            trace: Trace::new(trace_enabled),
            counters: Vec::new(),
            lost: 0,
            spoof_filtered: 0,
            undeliverable: 0,
        }
    }

    pub fn add_reactive_host(
        &mut self,
        label: impl Into<String>,
        addrs: AddrSet,
        host: Box<dyn ReactiveHost>,
    ) -> HostId {
        self.hosts.push(HostSlot { label: label.into(), addrs, node: HostNode::Reactive(host) });
        self.counters.push(HostCounters::default());
        HostId(self.hosts.len() - 1)
    }

    pub fn add_mailbox_host(&mut self, label: impl Into<String>, addrs: AddrSet) -> HostId {
        self.hosts.push(HostSlot { label: label.into(), addrs, node: HostNode::Mailbox(Vec::new()) });
        self.counters.push(HostCounters::default());
        HostId(self.hosts.len() - 1)
    }

    pub fn set_link(&mut self, from: HostId, to: HostId, link: LinkModel) {
        self.links.insert((from.0, to.0), link);
    }

    pub fn set_default_link(&mut self, link: LinkModel) {
        self.default_link = link;
    }

    #[must_use]
    pub fn link(&self, from: HostId, to: HostId) -> LinkModel {
        self.links.get(&(from.0, to.0)).copied().unwrap_or(self.default_link)
    }

    #[must_use]
    pub fn now(&self) -> u64 {
        self.now
    }

    #[must_use]
    pub fn host_label(&self, host: HostId) -> &str {
        &self.hosts[host.0].label
    }

    #[must_use]
    pub fn counters(&self, host: HostId) -> HostCounters {
        self.counters[host.0]
    }

    #[must_use]
    pub fn lost_packets(&self) -> u64 {
        self.lost
    }

    #[must_use]
    pub fn spoof_filtered(&self) -> u64 {
        self.spoof_filtered
    }

    #[must_use]
    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    /// Write a free-form note line into the trace on behalf of a host.
    pub fn record_note(&mut self, host: HostId, text: impl AsRef<str>) {
        let label = self.hosts[host.0].label.clone();
        self.trace.record(self.now, &label, Direction::Note, text.as_ref());
    }

    /// Borrow a reactive host's concrete state; scoring and tests use this,
    /// attacker code must not (it only sees the mailbox API).
    #[must_use]
    pub fn host_state<T: 'static>(&self, host: HostId) -> Option<&T> {
        match &self.hosts[host.0].node {
            HostNode::Reactive(h) => h.as_any().downcast_ref::<T>(),
            HostNode::Mailbox(_) => None,
        }
    }

    #[must_use]
    pub fn host_state_mut<T: 'static>(&mut self, host: HostId) -> Option<&mut T> {
        match &mut self.hosts[host.0].node {
            HostNode::Reactive(h) => h.as_any_mut().downcast_mut::<T>(),
            HostNode::Mailbox(_) => None,
        }
    }

    /// Schedule an event. Scheduling into the past is a bug in the caller
    /// and aborts the run.
    pub fn schedule(&mut self, fire_time: u64, action: EventAction) {
        assert!(
            fire_time >= self.now,
            "event scheduled in the past: fire_time {} < now {}",
            fire_time,
            self.now
        );
        let seqno = self.next_seqno;
        self.next_seqno += 1;
        self.events.push(Event { fire_time, seqno, action });
    }

    pub fn schedule_timer(&mut self, host: HostId, at: u64, token: u64) {
        self.schedule(at, EventAction::Timer { host, token });
    }

    /// Put a packet on the wire from `from`. Applies the spoofing filter and
    /// the link's loss process, then schedules delivery at the far end.
    pub fn transmit(&mut self, from: HostId, pkt: Packet) {
        self.counters[from.0].tx += 1;
        let to = self.owner_of(pkt.header.dst);
        let link = match to {
            Some(to) => self.link(from, to),
            None => self.default_link,
        };
        if !link.spoofing_permitted && !self.hosts[from.0].addrs.contains(pkt.header.src) {
            self.spoof_filtered += 1;
            let summary = pkt.summary();
            let label = self.hosts[from.0].label.clone();
            self.trace.record(self.now, &label, Direction::Filtered, &summary);
            return;
        }
        {
            let summary = pkt.summary();
            let label = self.hosts[from.0].label.clone();
            self.trace.record(self.now, &label, Direction::Tx, &summary);
        }
        if link.loss_rate > 0.0 && self.loss_rng.random::<f64>() < link.loss_rate {
            self.lost += 1;
            let summary = pkt.summary();
            let label = self.hosts[from.0].label.clone();
            self.trace.record(self.now, &label, Direction::Lost, &summary);
            return;
        }
        match to {
            Some(to) => {
                let at = self.now + link.latency_ms;
                self.schedule(at, EventAction::Deliver { packet: pkt, host: to });
            }
            None => {
                // No host owns the destination; the packet vanishes, which
                // is routine for probes spoofing scanned-for addresses.
                self.undeliverable += 1;
                let summary = pkt.summary();
                self.trace.record(self.now, "net", Direction::Note, &format!("unowned-dst {summary}"));
            }
        }
    }

    fn owner_of(&self, addr: Ipv4Addr) -> Option<HostId> {
        self.hosts
            .iter()
            .position(|slot| slot.addrs.contains(addr))
            .map(HostId)
    }

    /// Run every event with `fire_time <= t`, then set the clock to `t`.
    pub fn run_until(&mut self, t: u64) {
        while let Some(ev) = self.events.peek() {
            if ev.fire_time > t {
                break;
            }
            let ev = self.events.pop().expect("peeked event");
            self.now = ev.fire_time;
            self.dispatch(ev.action);
        }
        debug_assert!(self.now <= t);
        self.now = t;
    }

    /// Run until no events remain or the next event fires after `limit`.
    /// Returns the clock after the run.
    pub fn run_until_idle(&mut self, limit: u64) -> u64 {
        self.run_until(limit);
        self.now
    }

    fn dispatch(&mut self, action: EventAction) {
        match action {
            EventAction::Deliver { packet, host } => {
                self.counters[host.0].rx += 1;
                let summary = packet.summary();
                let label = self.hosts[host.0].label.clone();
                self.trace.record(self.now, &label, Direction::Rx, &summary);
                let now = self.now;
                match &mut self.hosts[host.0].node {
                    HostNode::Mailbox(inbox) => inbox.push((now, packet)),
                    HostNode::Reactive(h) => {
                        let mut out = HostOutbox::default();
                        h.handle_packet(&packet, now, &mut out);
                        self.flush_outbox(host, out);
                    }
                }
            }
            EventAction::Timer { host, token } => {
                let now = self.now;
                if let HostNode::Reactive(h) = &mut self.hosts[host.0].node {
                    let mut out = HostOutbox::default();
                    h.handle_timer(token, now, &mut out);
                    self.flush_outbox(host, out);
                }
            }
        }
    }

    fn flush_outbox(&mut self, host: HostId, out: HostOutbox) {
        for note in out.notes {
            let label = self.hosts[host.0].label.clone();
            self.trace.record(self.now, &label, Direction::Note, &note);
        }
        for pkt in out.packets {
            self.transmit(host, pkt);
        }
    }

    /// Take everything delivered to a mailbox host since the last drain.
    pub fn drain_mailbox(&mut self, host: HostId) -> Vec<(u64, Packet)> {
        match &mut self.hosts[host.0].node {
            HostNode::Mailbox(inbox) => std::mem::take(inbox),
            HostNode::Reactive(_) => panic!("drain_mailbox on a reactive host"),
        }
    }
}
