//! Path-MTU discovery state and the ICMP fragmentation-needed handler.
//!
//! A "fragmentation needed" error quoting a next-hop MTU below the host's
//! minimum PMTU makes the host stop setting DF toward that destination
//! (packetization falls back to fragmentation-friendly sizes). Since IPID
//! assignment dispatches on DF, this is the knob an off-path sender can turn
//! to move a victim's TCP traffic onto the shared, observable counters: the
//! downgrade needs nothing but a forged error with a plausible embedded
//! packet image.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::net::Ipv4Addr;

use crate::net::packet::{parse_packet_image, EmbeddedInfo, Protocol};

/// Default path MTU before any learning.
pub const DEFAULT_PMTU: u16 = 1500;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PmtudConfig {
    /// Floor under which a quoted next-hop MTU triggers the DF downgrade
    /// instead of a plain PMTU update (Linux uses 552).
    pub min_pmtu: u16,
    /// Strict mode: only accept errors whose embedded image matches an echo
    /// reply this host actually sent.
    pub validate_embedded_provenance: bool,
}

impl Default for PmtudConfig {
    fn default() -> PmtudConfig {
        PmtudConfig { min_pmtu: 552, validate_embedded_provenance: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteCacheEntry {
    pub pmtu: u16,
    pub df_cleared: bool,
}

impl Default for RouteCacheEntry {
    fn default() -> RouteCacheEntry {
        RouteCacheEntry { pmtu: DEFAULT_PMTU, df_cleared: false }
    }
}

/// Per-destination learned route state.
#[derive(Debug, Default)]
pub struct RouteCache {
    entries: BTreeMap<u32, RouteCacheEntry>,
}

impl RouteCache {
    #[must_use]
    pub fn entry(&self, dst: Ipv4Addr) -> RouteCacheEntry {
        self.entries.get(&u32::from(dst)).copied().unwrap_or_default()
    }

    /// DF bit for packets toward `dst`.
    #[must_use]
    pub fn df_for(&self, dst: Ipv4Addr) -> bool {
        !self.entry(dst).df_cleared
    }

    pub fn set(&mut self, dst: Ipv4Addr, entry: RouteCacheEntry) {
        self.entries.insert(u32::from(dst), entry);
    }
}

/// Ring of echo replies this host recently sent, for strict provenance
/// checks on embedded images.
#[derive(Debug, Default)]
pub struct EchoReplyLog {
    recent: VecDeque<(u32, u16, u16)>,
}

impl EchoReplyLog {
    const CAP: usize = 1024;

    pub fn record(&mut self, dst: Ipv4Addr, id: u16, seqno: u16) {
        if self.recent.len() == Self::CAP {
            self.recent.pop_front();
        }
        self.recent.push_back((u32::from(dst), id, seqno));
    }

    #[must_use]
    pub fn contains(&self, dst: Ipv4Addr, id: u16, seqno: u16) -> bool {
        self.recent.contains(&(u32::from(dst), id, seqno))
    }
}

/// Why a fragmentation-needed error was not applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FragNeededDiscard {
    EmbeddedUnparseable,
    NotOurPacket,
    ProvenanceUnknown,
}

/// Result of processing a fragmentation-needed error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FragNeededOutcome {
    /// Quoted MTU under the floor: DF cleared toward the destination.
    Downgraded { dst: Ipv4Addr },
    /// Quoted MTU at or above the floor: plain PMTU update, DF retained.
    PmtuAdjusted { dst: Ipv4Addr, pmtu: u16 },
    Discarded(FragNeededDiscard),
}

/// Validate the embedded image of a fragmentation-needed error. Lax mode
/// only requires a parseable image of a packet this host could have sent;
/// strict mode additionally demands a recorded echo reply.
#[must_use]
pub fn embedded_check(
    embedded: &[u8],
    host_addr: Ipv4Addr,
    cfg: &PmtudConfig,
    sent_replies: &EchoReplyLog,
) -> Result<EmbeddedInfo, FragNeededDiscard> {
    let info = parse_packet_image(embedded).ok_or(FragNeededDiscard::EmbeddedUnparseable)?;
    if info.src != host_addr {
        return Err(FragNeededDiscard::NotOurPacket);
    }
    if cfg.validate_embedded_provenance {
        let ok = info.protocol == Protocol::Icmp.number()
            && matches!(info.echo_reply, Some((id, seqno)) if sent_replies.contains(info.dst, id, seqno));
        if !ok {
            return Err(FragNeededDiscard::ProvenanceUnknown);
        }
    }
    Ok(info)
}

/// Apply a fragmentation-needed error to the route cache.
pub fn handle_frag_needed(
    routes: &mut RouteCache,
    cfg: &PmtudConfig,
    sent_replies: &EchoReplyLog,
    host_addr: Ipv4Addr,
    next_hop_mtu: u16,
    embedded: &[u8],
) -> FragNeededOutcome {
    let info = match embedded_check(embedded, host_addr, cfg, sent_replies) {
        Ok(info) => info,
        Err(reason) => return FragNeededOutcome::Discarded(reason),
    };
    let mut entry = routes.entry(info.dst);
    if next_hop_mtu < cfg.min_pmtu {
        entry.pmtu = cfg.min_pmtu;
        entry.df_cleared = true;
        routes.set(info.dst, entry);
        FragNeededOutcome::Downgraded { dst: info.dst }
    } else {
        entry.pmtu = next_hop_mtu;
        routes.set(info.dst, entry);
        FragNeededOutcome::PmtuAdjusted { dst: info.dst, pmtu: next_hop_mtu }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::packet::echo_reply_image;

    const SERVER: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
    const CLIENT: Ipv4Addr = Ipv4Addr::new(172, 16, 0, 9);

    fn forged_image() -> Vec<u8> {
        echo_reply_image(SERVER, CLIENT, 77, 1, 1)
    }

    #[test]
    fn tiny_mtu_clears_df_and_clamps_pmtu() {
        let mut routes = RouteCache::default();
        let cfg = PmtudConfig::default();
        assert!(routes.df_for(CLIENT));
        let out = handle_frag_needed(&mut routes, &cfg, &EchoReplyLog::default(), SERVER, 68, &forged_image());
        assert_eq!(out, FragNeededOutcome::Downgraded { dst: CLIENT });
        let e = routes.entry(CLIENT);
        assert!(e.df_cleared && !routes.df_for(CLIENT));
        assert_eq!(e.pmtu, 552);
    }

    #[test]
    fn ordinary_mtu_updates_pmtu_keeping_df() {
        let mut routes = RouteCache::default();
        let cfg = PmtudConfig::default();
        let out = handle_frag_needed(&mut routes, &cfg, &EchoReplyLog::default(), SERVER, 1400, &forged_image());
        assert_eq!(out, FragNeededOutcome::PmtuAdjusted { dst: CLIENT, pmtu: 1400 });
        let e = routes.entry(CLIENT);
        assert!(!e.df_cleared && routes.df_for(CLIENT));
        assert_eq!(e.pmtu, 1400);
    }

    #[test]
    fn short_embedded_image_is_discarded() {
        let mut routes = RouteCache::default();
        let cfg = PmtudConfig::default();
        let out = handle_frag_needed(
            &mut routes,
            &cfg,
            &EchoReplyLog::default(),
            SERVER,
            68,
            &forged_image()[..20],
        );
        assert_eq!(out, FragNeededOutcome::Discarded(FragNeededDiscard::EmbeddedUnparseable));
        assert!(routes.df_for(CLIENT));
    }

    #[test]
    fn image_of_someone_elses_packet_is_discarded() {
        let mut routes = RouteCache::default();
        let cfg = PmtudConfig::default();
        let image = echo_reply_image(CLIENT, SERVER, 0, 1, 1); // src is not us
        let out = handle_frag_needed(&mut routes, &cfg, &EchoReplyLog::default(), SERVER, 68, &image);
        assert_eq!(out, FragNeededOutcome::Discarded(FragNeededDiscard::NotOurPacket));
    }

    #[test]
    fn strict_mode_rejects_unlogged_replies_and_accepts_logged_ones() {
        let cfg = PmtudConfig { validate_embedded_provenance: true, ..PmtudConfig::default() };
        let mut routes = RouteCache::default();
        let mut log = EchoReplyLog::default();
        let image = echo_reply_image(SERVER, CLIENT, 9, 5, 31);

        let out = handle_frag_needed(&mut routes, &cfg, &log, SERVER, 68, &image);
        assert_eq!(out, FragNeededOutcome::Discarded(FragNeededDiscard::ProvenanceUnknown));
        assert!(routes.df_for(CLIENT));

        // after the host demonstrably sent that reply, the same error lands
        log.record(CLIENT, 5, 31);
        let out = handle_frag_needed(&mut routes, &cfg, &log, SERVER, 68, &image);
        assert_eq!(out, FragNeededOutcome::Downgraded { dst: CLIENT });
        assert!(!routes.df_for(CLIENT));
    }
}
