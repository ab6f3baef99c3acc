//! Declarative scenario configuration.
//!
//! A scenario fixes everything except the seed: the topology, the victim's
//! stack knobs, the benign connection, the link conditions, and the
//! attacker's budgets. Configs load from TOML with a strict schema —
//! unknown keys are rejected so a typo cannot silently fall back to a
//! default.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacker::{AttackConfig, Phase};
use crate::victim::ipid::PolicyVariant;

/// Which slice of the attack a run exercises, and how it is judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Forge the PMTUD downgrade only; success = DF cleared toward the client.
    DowngradeOnly,
    /// Downgrade plus hash-collision search; success = a confirmed collider
    /// that really shares the client's counter.
    CollisionScan,
    /// Through the port sweep; success = the client's true source port.
    PortDetect,
    /// Full pipeline ending in a spoofed reset; success = the victim's
    /// connection is gone afterwards.
    FullReset,
    /// Full pipeline (including ACK inference) ending in data injection;
    /// success = the payload lands in the server's receive buffer.
    FullInject,
    /// The reset pipeline pointed at a hardened IPID policy; expected to
    /// die in the collision phase. Kept as its own kind so control batches
    /// are explicit in configs and summaries.
    PatchedControl,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::DowngradeOnly,
        ScenarioKind::CollisionScan,
        ScenarioKind::PortDetect,
        ScenarioKind::FullReset,
        ScenarioKind::FullInject,
        ScenarioKind::PatchedControl,
    ];

    #[must_use]
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::DowngradeOnly => "downgrade_only",
            ScenarioKind::CollisionScan => "collision_scan",
            ScenarioKind::PortDetect => "port_detect",
            ScenarioKind::FullReset => "full_reset",
            ScenarioKind::FullInject => "full_inject",
            ScenarioKind::PatchedControl => "patched_control",
        }
    }

    /// Attack phases this kind runs, in order.
    #[must_use]
    pub fn phases(self) -> &'static [Phase] {
        use Phase::*;
        match self {
            ScenarioKind::DowngradeOnly => &[Downgrade],
            ScenarioKind::CollisionScan => &[Downgrade, Collision],
            ScenarioKind::PortDetect => &[Downgrade, Collision, PortScan],
            ScenarioKind::FullReset | ScenarioKind::PatchedControl => {
                &[Downgrade, Collision, PortScan, SeqInference, ChallengeWindow, ExactSeq, Execute]
            }
            ScenarioKind::FullInject => &[
                Downgrade,
                Collision,
                PortScan,
                SeqInference,
                ChallengeWindow,
                ExactSeq,
                AckInference,
                Execute,
            ],
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<ScenarioKind, String> {
        ScenarioKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            format!(
                "unknown scenario kind `{s}` (expected one of downgrade_only, collision_scan, \
                 port_detect, full_reset, full_inject, patched_control)"
            )
        })
    }
}

/// Who sits where. Attacker addresses are a contiguous block starting at
/// `attacker_pool_base`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    pub server_addr: Ipv4Addr,
    pub client_addr: Ipv4Addr,
    pub attacker_pool_base: Ipv4Addr,
    pub attacker_pool_size: u32,
}

impl Default for TopologyConfig {
    fn default() -> TopologyConfig {
        TopologyConfig {
            server_addr: Ipv4Addr::new(10, 0, 0, 1),
            client_addr: Ipv4Addr::new(172, 16, 0, 9),
            attacker_pool_base: Ipv4Addr::new(198, 51, 100, 0),
            attacker_pool_size: 8192,
        }
    }
}

/// Victim stack knobs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VictimConfig {
    /// IPID assignment policy under test.
    pub ipid_policy: PolicyVariant,
    pub listening_port: u16,
    /// Answer out-of-nowhere SYN/ACKs with a RST (vs. dropping silently).
    pub rst_on_unexpected_synack: bool,
    /// Per-connection challenge-ACK spacing.
    pub challenge_ack_interval_ms: u64,
    /// Global challenge-ACK budget per second; 0 disables the cap.
    pub global_challenge_ack_per_sec: u32,
    /// Only honor ICMP errors whose embedded packet matches something this
    /// host actually sent.
    pub strict_frag_needed_provenance: bool,
}

impl Default for VictimConfig {
    fn default() -> VictimConfig {
        VictimConfig {
            ipid_policy: PolicyVariant::MixedDfBased,
            listening_port: 22,
            rst_on_unexpected_synack: true,
            challenge_ack_interval_ms: 500,
            global_challenge_ack_per_sec: 1000,
            strict_frag_needed_provenance: false,
        }
    }
}

/// The benign long-lived connection the attacker goes after.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConnectionConfig {
    /// Client source port; 0 draws one from the setup RNG inside the
    /// attacker's scanned range.
    pub client_port: u16,
    /// Bytes the client pushes right after the handshake, so the server's
    /// expected sequence number is not trivially `iss + 1`.
    pub initial_payload_bytes: u32,
}

impl Default for ConnectionConfig {
    fn default() -> ConnectionConfig {
        ConnectionConfig { client_port: 0, initial_payload_bytes: 64 }
    }
}

/// Link conditions. One latency per run is drawn uniformly from
/// `[latency_min_ms, latency_max_ms]` and applied to every directed link,
/// so the round-trip time is twice the draw. Loss applies to attack
/// traffic; the benign client's links stay loss-free so a run measures the
/// attack, not the client's lack of retransmission logic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkConfig {
    pub latency_min_ms: u64,
    pub latency_max_ms: u64,
    pub loss_rate: f64,
    /// Whether links forward packets with source addresses the sender does
    /// not own (the ingress-filtering deployment gap the attack needs).
    pub spoofing_permitted: bool,
}

impl Default for LinkConfig {
    fn default() -> LinkConfig {
        LinkConfig { latency_min_ms: 10, latency_max_ms: 10, loss_rate: 0.0, spoofing_permitted: true }
    }
}

/// Attacker budgets and pacing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackerConfig {
    /// Send ceiling for inference phases, any sliding one-second window.
    pub probe_rate_pps: u32,
    /// Higher ceiling reserved for the port sweep.
    pub port_scan_rate_pps: u32,
    pub port_range_min: u16,
    pub port_range_max: u16,
    /// Echo-request cadence keeping observed counters linear (1..=10 ms).
    pub echo_interval_ms: u64,
    /// Retries granted to any ambiguous detection step.
    pub retry_on_ambiguity: u32,
    /// Bytes injected by `full_inject` runs.
    pub injection_payload: String,
    /// Per-phase virtual-time budgets (milliseconds), keyed by phase name;
    /// phases not listed keep their defaults.
    pub phase_timeout_ms: BTreeMap<String, u64>,
}

impl Default for AttackerConfig {
    fn default() -> AttackerConfig {
        AttackerConfig {
            probe_rate_pps: 300,
            port_scan_rate_pps: 1000,
            port_range_min: 32_768,
            port_range_max: 61_000,
            echo_interval_ms: 8,
            retry_on_ambiguity: 1,
            injection_payload: "pwned-by-off-path".to_string(),
            phase_timeout_ms: BTreeMap::new(),
        }
    }
}

/// Full scenario description. `seed` is the default base seed; batch
/// drivers may override it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub topology: TopologyConfig,
    #[serde(default)]
    pub victim: VictimConfig,
    #[serde(default)]
    pub connection: ConnectionConfig,
    #[serde(default)]
    pub link: LinkConfig,
    #[serde(default)]
    pub attacker: AttackerConfig,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config does not parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config is invalid:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

impl ScenarioConfig {
    /// A runnable default for the given kind.
    #[must_use]
    pub fn new(kind: ScenarioKind) -> ScenarioConfig {
        let mut cfg = ScenarioConfig {
            kind,
            seed: default_seed(),
            topology: TopologyConfig::default(),
            victim: VictimConfig::default(),
            connection: ConnectionConfig::default(),
            link: LinkConfig::default(),
            attacker: AttackerConfig::default(),
        };
        if kind == ScenarioKind::PatchedControl {
            cfg.victim.ipid_policy = PolicyVariant::ProtocolFieldBased;
        }
        cfg
    }

    pub fn from_toml_str(s: &str) -> Result<ScenarioConfig, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ScenarioConfig, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        ScenarioConfig::from_toml_str(&text)
    }

    /// Check every constraint and report all violations at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let t = &self.topology;
        if t.attacker_pool_size == 0 {
            errs.push("topology.attacker_pool_size must be at least 1".to_string());
        }
        if t.attacker_pool_size > 1 << 20 {
            errs.push("topology.attacker_pool_size must be at most 2^20".to_string());
        }
        let pool_end = u64::from(u32::from(t.attacker_pool_base)) + u64::from(t.attacker_pool_size);
        if pool_end > u64::from(u32::MAX) + 1 {
            errs.push("topology.attacker_pool_base + attacker_pool_size overflows the address space".to_string());
        }
        let mut distinct = vec![u32::from(t.server_addr), u32::from(t.client_addr)];
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() != 2 {
            errs.push("topology.server_addr and client_addr must be distinct".to_string());
        }
        let pool_start = u64::from(u32::from(t.attacker_pool_base));
        for (label, addr) in [("server_addr", t.server_addr), ("client_addr", t.client_addr)] {
            let a = u64::from(u32::from(addr));
            if a >= pool_start && a < pool_end {
                errs.push(format!("topology.{label} falls inside the attacker address pool"));
            }
        }

        let v = &self.victim;
        if v.listening_port == 0 {
            errs.push("victim.listening_port must be nonzero".to_string());
        }
        if v.challenge_ack_interval_ms == 0 {
            errs.push("victim.challenge_ack_interval_ms must be nonzero".to_string());
        }
        if self.kind == ScenarioKind::PatchedControl && v.ipid_policy == PolicyVariant::MixedDfBased {
            errs.push(
                "patched_control runs need a hardened victim.ipid_policy \
                 (protocol_field_based or rst_destination_counter)"
                    .to_string(),
            );
        }

        let a = &self.attacker;
        if a.port_range_min > a.port_range_max {
            errs.push("attacker.port_range_min must not exceed port_range_max".to_string());
        }
        let trigger_sport = self.attack_config().trigger_sport;
        if (a.port_range_min..=a.port_range_max).contains(&trigger_sport) {
            errs.push(format!(
                "attacker port range must not contain the collision-trigger source port ({trigger_sport})"
            ));
        }
        if !(1..=10).contains(&a.echo_interval_ms) {
            errs.push("attacker.echo_interval_ms must be in 1..=10".to_string());
        } else {
            let echo_rate = (1000 / a.echo_interval_ms) as u32;
            if a.probe_rate_pps <= echo_rate + 1 {
                errs.push(format!(
                    "attacker.probe_rate_pps ({}) must exceed the echo rate plus one ({})",
                    a.probe_rate_pps,
                    echo_rate + 1
                ));
            }
            if a.port_scan_rate_pps <= echo_rate + 1 {
                errs.push(format!(
                    "attacker.port_scan_rate_pps ({}) must exceed the echo rate plus one ({})",
                    a.port_scan_rate_pps,
                    echo_rate + 1
                ));
            }
        }
        if self.kind == ScenarioKind::FullInject && a.injection_payload.is_empty() {
            errs.push("attacker.injection_payload must be nonempty for full_inject runs".to_string());
        }
        for name in a.phase_timeout_ms.keys() {
            if name.parse::<Phase>().is_err() {
                errs.push(format!("attacker.phase_timeout_ms names unknown phase `{name}`"));
            }
        }

        let c = &self.connection;
        if c.client_port != 0 {
            if c.client_port == v.listening_port {
                errs.push("connection.client_port must differ from victim.listening_port".to_string());
            }
            if !(a.port_range_min..=a.port_range_max).contains(&c.client_port) {
                errs.push(format!(
                    "connection.client_port ({}) lies outside the attacker's scanned range {}..={}",
                    c.client_port, a.port_range_min, a.port_range_max
                ));
            }
        }
        if c.initial_payload_bytes > 65_535 {
            errs.push("connection.initial_payload_bytes must be at most 65535".to_string());
        }

        let l = &self.link;
        if l.latency_min_ms == 0 {
            errs.push("link.latency_min_ms must be nonzero".to_string());
        }
        if l.latency_min_ms > l.latency_max_ms {
            errs.push("link.latency_min_ms must not exceed latency_max_ms".to_string());
        }
        if !(0.0..1.0).contains(&l.loss_rate) {
            errs.push("link.loss_rate must be in [0, 1)".to_string());
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    /// Attacker-side parameter block derived from this scenario.
    #[must_use]
    pub fn attack_config(&self) -> AttackConfig {
        let t = &self.topology;
        let a = &self.attacker;
        let mut cfg = AttackConfig::new(
            t.server_addr,
            self.victim.listening_port,
            t.client_addr,
            t.attacker_pool_base,
            t.attacker_pool_size,
        );
        cfg.probe_rate_pps = a.probe_rate_pps;
        cfg.port_scan_rate_pps = a.port_scan_rate_pps;
        cfg.port_range = (a.port_range_min, a.port_range_max);
        cfg.retry_on_ambiguity = a.retry_on_ambiguity;
        cfg.echo_interval_ms = a.echo_interval_ms;
        cfg.challenge_ack_interval_ms = self.victim.challenge_ack_interval_ms;
        for (name, ms) in &a.phase_timeout_ms {
            if let Ok(phase) = name.parse::<Phase>() {
                cfg.phase_timeout_ms.insert(phase, *ms);
            }
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_for_every_kind() {
        for kind in ScenarioKind::ALL {
            let cfg = ScenarioConfig::new(kind);
            cfg.validate().unwrap_or_else(|e| panic!("{:?}: {e}", kind));
        }
    }

    #[test]
    fn minimal_toml_parses_with_defaults() {
        let cfg = ScenarioConfig::from_toml_str("kind = \"full_reset\"\n").unwrap();
        assert_eq!(cfg.kind, ScenarioKind::FullReset);
        assert_eq!(cfg.seed, 1);
        assert_eq!(cfg.topology, TopologyConfig::default());
        assert_eq!(cfg.attacker.probe_rate_pps, 300);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        let top = "kind = \"full_reset\"\nbogus = 3\n";
        assert!(ScenarioConfig::from_toml_str(top).is_err());
        let nested = "kind = \"full_reset\"\n[victim]\nlistning_port = 22\n";
        assert!(ScenarioConfig::from_toml_str(nested).is_err());
        let link = "kind = \"full_reset\"\n[link]\nlatencyms = 5\n";
        assert!(ScenarioConfig::from_toml_str(link).is_err());
    }

    #[test]
    fn violations_are_collected_not_short_circuited() {
        let text = r#"
kind = "full_inject"
[attacker]
port_range_min = 50000
port_range_max = 40000
echo_interval_ms = 25
injection_payload = ""
[link]
latency_min_ms = 0
loss_rate = 1.5
"#;
        let err = ScenarioConfig::from_toml_str(text).unwrap_err();
        match err {
            ConfigError::Invalid(errs) => {
                assert!(errs.len() >= 5, "expected all violations listed, got {errs:?}");
                assert!(errs.iter().any(|e| e.contains("port_range_min")));
                assert!(errs.iter().any(|e| e.contains("echo_interval_ms")));
                assert!(errs.iter().any(|e| e.contains("injection_payload")));
                assert!(errs.iter().any(|e| e.contains("latency_min_ms")));
                assert!(errs.iter().any(|e| e.contains("loss_rate")));
            }
            other => panic!("expected Invalid, got {other}"),
        }
    }

    #[test]
    fn patched_control_rejects_the_vulnerable_policy() {
        let text = "kind = \"patched_control\"\n[victim]\nipid_policy = \"mixed_df_based\"\n";
        assert!(ScenarioConfig::from_toml_str(text).is_err());
        let ok = "kind = \"patched_control\"\n[victim]\nipid_policy = \"protocol_field_based\"\n";
        assert!(ScenarioConfig::from_toml_str(ok).is_ok());
    }

    #[test]
    fn fixed_client_port_must_sit_in_the_scanned_range() {
        let bad = "kind = \"port_detect\"\n[connection]\nclient_port = 1000\n";
        assert!(ScenarioConfig::from_toml_str(bad).is_err());
        let good = "kind = \"port_detect\"\n[connection]\nclient_port = 40000\n";
        assert!(ScenarioConfig::from_toml_str(good).is_ok());
    }

    #[test]
    fn phase_timeouts_flow_into_the_attack_config() {
        let text = "kind = \"full_reset\"\n[attacker]\n[attacker.phase_timeout_ms]\nport_scan = 12345\n";
        let cfg = ScenarioConfig::from_toml_str(text).unwrap();
        let acfg = cfg.attack_config();
        assert_eq!(acfg.timeout(Phase::PortScan), 12_345);
        assert_eq!(acfg.timeout(Phase::Collision), 600_000);
        let bad = "kind = \"full_reset\"\n[attacker.phase_timeout_ms]\nportscan = 1\n";
        assert!(ScenarioConfig::from_toml_str(bad).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ScenarioConfig::new(ScenarioKind::FullInject);
        let text = toml::to_string(&cfg).unwrap();
        let back = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
