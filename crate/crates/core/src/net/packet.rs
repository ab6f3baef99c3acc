//! Packet model.
//!
//! Packets are plain values copied on delivery; there is no wire
//! serialization except for the one place the attack depends on bytes: the
//! payload a "fragmentation needed" ICMP error embeds (the leading octets of
//! the datagram that allegedly hit the small-MTU hop). That image is encoded
//! and parsed exactly, IPv4 header checksum included, because the victim
//! inspects it to decide whether the error is plausible.

use std::fmt;
use std::net::Ipv4Addr;

/// IP protocol numbers the simulation carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Protocol {
    Icmp = 1,
    Tcp = 6,
}

impl Protocol {
    #[must_use]
    pub fn number(self) -> u8 {
        self as u8
    }
}

/// TCP flag set. Only the five flags the model reacts to are represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TcpFlags(u8);

impl TcpFlags {
    pub const SYN: TcpFlags = TcpFlags(0b00001);
    pub const ACK: TcpFlags = TcpFlags(0b00010);
    pub const RST: TcpFlags = TcpFlags(0b00100);
    pub const FIN: TcpFlags = TcpFlags(0b01000);
    pub const PSH: TcpFlags = TcpFlags(0b10000);

    #[must_use]
    pub fn empty() -> TcpFlags {
        TcpFlags(0)
    }

    #[must_use]
    pub fn contains(self, other: TcpFlags) -> bool {
        self.0 & other.0 == other.0
    }

    #[must_use]
    pub fn is_syn(self) -> bool {
        self.contains(TcpFlags::SYN)
    }

    #[must_use]
    pub fn is_ack(self) -> bool {
        self.contains(TcpFlags::ACK)
    }

    #[must_use]
    pub fn is_rst(self) -> bool {
        self.contains(TcpFlags::RST)
    }

    #[must_use]
    pub fn is_syn_ack(self) -> bool {
        self.contains(TcpFlags::SYN | TcpFlags::ACK)
    }
}

impl std::ops::BitOr for TcpFlags {
    type Output = TcpFlags;
    fn bitor(self, rhs: TcpFlags) -> TcpFlags {
        TcpFlags(self.0 | rhs.0)
    }
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 0 {
            return write!(f, "-");
        }
        for (bit, ch) in [
            (TcpFlags::SYN, 'S'),
            (TcpFlags::ACK, 'A'),
            (TcpFlags::RST, 'R'),
            (TcpFlags::FIN, 'F'),
            (TcpFlags::PSH, 'P'),
        ] {
            if self.contains(bit) {
                write!(f, "{ch}")?;
            }
        }
        Ok(())
    }
}

/// TCP segment body. A RST never carries payload; the constructor rejects it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpSegment {
    pub sport: u16,
    pub dport: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: TcpFlags,
    pub window: u16,
    pub payload: Vec<u8>,
}

impl TcpSegment {
    #[must_use]
    pub fn new(sport: u16, dport: u16, seq: u32, ack: u32, flags: TcpFlags) -> TcpSegment {
        TcpSegment { sport, dport, seq, ack, flags, window: 65535, payload: Vec::new() }
    }

    #[must_use]
    pub fn with_payload(mut self, payload: Vec<u8>) -> TcpSegment {
        assert!(!self.flags.is_rst() || payload.is_empty(), "RST segments carry no payload");
        self.payload = payload;
        self
    }

    #[must_use]
    pub fn payload_len(&self) -> u32 {
        self.payload.len() as u32
    }
}

/// Longest embedded image a "fragmentation needed" error may carry.
pub const MAX_EMBEDDED_LEN: usize = 576;

/// Shortest embedded image a receiver will look at: IPv4 header plus the
/// first 8 octets of the offending datagram.
pub const MIN_EMBEDDED_LEN: usize = 28;

/// ICMP message bodies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IcmpMessage {
    EchoRequest { id: u16, seqno: u16 },
    EchoReply { id: u16, seqno: u16 },
    /// Destination-unreachable / fragmentation-needed (type 3 code 4).
    FragNeeded { next_hop_mtu: u16, embedded: Vec<u8> },
}

impl IcmpMessage {
    /// Build a fragmentation-needed error; the embedded image is capped at
    /// the historical 576-octet limit for ICMP error payloads.
    #[must_use]
    pub fn frag_needed(next_hop_mtu: u16, embedded: Vec<u8>) -> IcmpMessage {
        assert!(embedded.len() <= MAX_EMBEDDED_LEN, "embedded image exceeds 576 octets");
        IcmpMessage::FragNeeded { next_hop_mtu, embedded }
    }

    #[must_use]
    fn body_len(&self) -> u16 {
        match self {
            IcmpMessage::EchoRequest { .. } | IcmpMessage::EchoReply { .. } => 8,
            IcmpMessage::FragNeeded { embedded, .. } => 8 + embedded.len() as u16,
        }
    }
}

/// The header fields the simulation models.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ipv4Header {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub ipid: u16,
    pub df: bool,
    pub protocol: Protocol,
    pub total_length: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PacketBody {
    Tcp(TcpSegment),
    Icmp(IcmpMessage),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub header: Ipv4Header,
    pub body: PacketBody,
}

impl Packet {
    /// Assemble a TCP packet; `total_length` is derived from the payload.
    #[must_use]
    pub fn tcp(src: Ipv4Addr, dst: Ipv4Addr, ipid: u16, df: bool, seg: TcpSegment) -> Packet {
        assert!(!seg.flags.is_rst() || seg.payload.is_empty(), "RST segments carry no payload");
        let total_length = 20 + 20 + seg.payload.len() as u16;
        Packet {
            header: Ipv4Header { src, dst, ipid, df, protocol: Protocol::Tcp, total_length },
            body: PacketBody::Tcp(seg),
        }
    }

    /// Assemble an ICMP packet; `total_length` is derived from the message.
    #[must_use]
    pub fn icmp(src: Ipv4Addr, dst: Ipv4Addr, ipid: u16, df: bool, msg: IcmpMessage) -> Packet {
        let total_length = 20 + msg.body_len();
        Packet {
            header: Ipv4Header { src, dst, ipid, df, protocol: Protocol::Icmp, total_length },
            body: PacketBody::Icmp(msg),
        }
    }

    #[must_use]
    pub fn tcp_segment(&self) -> Option<&TcpSegment> {
        match &self.body {
            PacketBody::Tcp(seg) => Some(seg),
            PacketBody::Icmp(_) => None,
        }
    }

    /// Stable one-line rendering used by the trace log.
    #[must_use]
    pub fn summary(&self) -> String {
        let h = &self.header;
        match &self.body {
            PacketBody::Tcp(seg) => format!(
                "TCP {}:{}>{}:{} {} seq={} ack={} win={} len={} ipid={} df={}",
                h.src,
                seg.sport,
                h.dst,
                seg.dport,
                seg.flags,
                seg.seq,
                seg.ack,
                seg.window,
                seg.payload.len(),
                h.ipid,
                u8::from(h.df),
            ),
            PacketBody::Icmp(msg) => {
                let detail = match msg {
                    IcmpMessage::EchoRequest { id, seqno } => {
                        format!("echo-req id={id} seq={seqno}")
                    }
                    IcmpMessage::EchoReply { id, seqno } => {
                        format!("echo-reply id={id} seq={seqno}")
                    }
                    IcmpMessage::FragNeeded { next_hop_mtu, embedded } => {
                        format!("frag-needed mtu={} embed={}", next_hop_mtu, embedded.len())
                    }
                };
                format!(
                    "ICMP {}>{} {} ipid={} df={}",
                    h.src,
                    h.dst,
                    detail,
                    h.ipid,
                    u8::from(h.df),
                )
            }
        }
    }
}

/// RFC 1071 ones'-complement checksum over 16-bit words.
fn inet_checksum(bytes: &[u8]) -> u16 {
    let mut sum: u32 = 0;
    let mut chunks = bytes.chunks_exact(2);
    for w in &mut chunks {
        sum += u32::from(u16::from_be_bytes([w[0], w[1]]));
    }
    if let [last] = chunks.remainder() {
        sum += u32::from(u16::from_be_bytes([*last, 0]));
    }
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Encode the 28-octet image of an ICMP echo reply datagram: the 20-octet
/// IPv4 header and the first 8 octets of the ICMP message. This is what a
/// router would quote back when that reply exceeded a hop MTU.
#[must_use]
pub fn echo_reply_image(src: Ipv4Addr, dst: Ipv4Addr, ipid: u16, id: u16, seqno: u16) -> Vec<u8> {
    let mut b = vec![0u8; 28];
    b[0] = 0x45; // version 4, IHL 5
    b[2..4].copy_from_slice(&28u16.to_be_bytes());
    b[4..6].copy_from_slice(&ipid.to_be_bytes());
    // flags/fragment offset zero: echo replies go out with DF clear
    b[8] = 64; // TTL
    b[9] = Protocol::Icmp.number();
    b[12..16].copy_from_slice(&src.octets());
    b[16..20].copy_from_slice(&dst.octets());
    let cksum = inet_checksum(&b[0..20]);
    b[10..12].copy_from_slice(&cksum.to_be_bytes());
    // ICMP echo reply header: type 0, code 0
    b[24..26].copy_from_slice(&id.to_be_bytes());
    b[26..28].copy_from_slice(&seqno.to_be_bytes());
    let icmp_cksum = inet_checksum(&b[20..28]);
    b[22..24].copy_from_slice(&icmp_cksum.to_be_bytes());
    b
}

/// What a receiver can learn from an embedded packet image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddedInfo {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub protocol: u8,
    /// `(id, seqno)` when the image is an ICMP echo reply.
    pub echo_reply: Option<(u16, u16)>,
}

/// Parse an embedded datagram image. Returns `None` when the image is too
/// short, is not a plain IPv4 header, or fails its header checksum.
#[must_use]
pub fn parse_packet_image(bytes: &[u8]) -> Option<EmbeddedInfo> {
    if bytes.len() < MIN_EMBEDDED_LEN || bytes[0] != 0x45 {
        return None;
    }
    if inet_checksum(&bytes[0..20]) != 0 {
        return None;
    }
    let src = Ipv4Addr::new(bytes[12], bytes[13], bytes[14], bytes[15]);
    let dst = Ipv4Addr::new(bytes[16], bytes[17], bytes[18], bytes[19]);
    let protocol = bytes[9];
    let echo_reply = if protocol == Protocol::Icmp.number() && bytes[20] == 0 && bytes[21] == 0 {
        Some((
            u16::from_be_bytes([bytes[24], bytes[25]]),
            u16::from_be_bytes([bytes[26], bytes[27]]),
        ))
    } else {
        None
    };
    Some(EmbeddedInfo { src, dst, protocol, echo_reply })
}
