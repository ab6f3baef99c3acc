//! Per-run reports and batch summaries.
//!
//! Field names here are a stable output contract: the CLI serializes these
//! types to JSON, and downstream tooling keys on the names. Change them and
//! you break every consumer — don't.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attacker::{FailureReason, Phase, PhaseOutcome};
use crate::scenario::config::ScenarioKind;

/// Verdict for one run, judged against simulator ground truth — a run only
/// counts as a success if the attacker's claim is actually true in the
/// simulated victim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackOutcome {
    Success,
    Failure(FailureReason),
}

impl AttackOutcome {
    #[must_use]
    pub fn is_success(&self) -> bool {
        matches!(self, AttackOutcome::Success)
    }

    /// Short label used in summary failure histograms.
    #[must_use]
    pub fn label(&self) -> String {
        match self {
            AttackOutcome::Success => "success".to_string(),
            AttackOutcome::Failure(r) => r.to_string(),
        }
    }
}

/// One attack phase as it actually ran.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: Phase,
    /// Virtual milliseconds spent inside the phase.
    pub virtual_ms: u64,
    /// Packets the attacker sent during the phase.
    pub packets_sent: u64,
    pub outcome: PhaseOutcome,
    /// Phase product, if any (collider address as u32, port, sequence
    /// number, ...), widened to u64.
    pub inferred_value: Option<u64>,
}

/// Everything observable about a single run: the attacker's claims, the
/// ground truth they are judged against, timing, and audit counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub outcome: AttackOutcome,
    pub phases: Vec<PhaseReport>,
    pub total_virtual_ms: u64,
    pub total_packets: u64,
    /// Highest attacker send rate over any sliding one-second window.
    pub peak_rate_pps: u64,
    /// Collision trials performed during the search phase.
    pub collision_trials: u64,
    /// Latency drawn for this run's links (round trip is twice this).
    pub link_latency_ms: u64,

    // Attacker claims vs. ground truth. `true_*` values are snapshots taken
    // while the connection still existed.
    pub collider_claimed: Option<u32>,
    pub collider_truly_shares_counter: bool,
    pub inferred_port: Option<u16>,
    pub true_port: u16,
    pub inferred_rcv_nxt: Option<u32>,
    pub true_rcv_nxt: Option<u32>,
    pub inferred_snd_una: Option<u32>,
    pub true_snd_una: Option<u32>,

    /// The victim's connection died before the execute phase (an inference
    /// probe must have hit the exact sequence) — always a failure.
    pub premature_reset: bool,
    /// Ground truth after execution: does the victim still hold the
    /// connection?
    pub connection_alive_at_end: bool,
    /// Ground truth: injected payload present in the server's receive
    /// buffer.
    pub payload_delivered: bool,
    /// DF bit cleared toward the client (the downgrade took).
    pub df_cleared: bool,

    // Victim-side audit counters.
    pub tcp_hash_draws: u64,
    pub socketless_tcp_fallbacks: u64,
    pub packets_lost: u64,
    pub spoof_filtered: u64,

    /// Full event trace, when recording was requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
}

impl AttackReport {
    /// Did the exact-sequence inference land bit-for-bit on the truth?
    #[must_use]
    pub fn rcv_nxt_exact(&self) -> bool {
        match (self.inferred_rcv_nxt, self.true_rcv_nxt) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }

    /// Did ACK inference recover `snd_una` bit-for-bit?
    #[must_use]
    pub fn snd_una_exact(&self) -> bool {
        match (self.inferred_snd_una, self.true_snd_una) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }

    #[must_use]
    pub fn phase(&self, phase: Phase) -> Option<&PhaseReport> {
        self.phases.iter().find(|p| p.phase == phase)
    }
}

/// Aggregate view of a batch. Means over successes are reported separately
/// from means over all runs because failed runs often burn their full
/// timeout and would drown the signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub kind: String,
    pub base_seed: u64,
    pub runs: u64,
    pub successes: u64,
    pub success_rate: f64,
    pub mean_virtual_ms_all: f64,
    pub mean_virtual_ms_success: f64,
    pub median_virtual_ms_success: f64,
    pub mean_packets_success: f64,
    pub mean_peak_rate_pps: f64,
    pub mean_collision_trials: f64,
    /// Runs whose exact-sequence claim matched ground truth bit-for-bit.
    pub rcv_nxt_exact_count: u64,
    /// Runs whose ACK inference matched ground truth bit-for-bit.
    pub snd_una_exact_count: u64,
    /// Runs where an inference probe reset the connection prematurely.
    pub premature_resets: u64,
    /// Sum of victim hash-counter draws for TCP packets across the batch.
    pub tcp_hash_draws_total: u64,
    /// Mean virtual milliseconds per phase, over runs that ran the phase.
    pub phase_mean_virtual_ms: BTreeMap<String, f64>,
    /// Mean packets per phase, over runs that ran the phase.
    pub phase_mean_packets: BTreeMap<String, f64>,
    /// Failure label -> count, successes excluded.
    pub failure_counts: BTreeMap<String, u64>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut n = 0u64;
    let mut sum = 0.0;
    for v in values {
        n += 1;
        sum += v;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in durations"));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) / 2.0
    }
}

/// Collapse a batch of reports into the summary the CLI serializes.
#[must_use]
pub fn summarize(kind: ScenarioKind, base_seed: u64, reports: &[AttackReport]) -> MetricsSummary {
    let runs = reports.len() as u64;
    let successes = reports.iter().filter(|r| r.outcome.is_success()).count() as u64;
    let succ = || reports.iter().filter(|r| r.outcome.is_success());

    let mut phase_mean_virtual_ms = BTreeMap::new();
    let mut phase_mean_packets = BTreeMap::new();
    for phase in Phase::ALL {
        let rows: Vec<&PhaseReport> = reports.iter().filter_map(|r| r.phase(phase)).collect();
        if rows.is_empty() {
            continue;
        }
        phase_mean_virtual_ms
            .insert(phase.name().to_string(), mean(rows.iter().map(|p| p.virtual_ms as f64)));
        phase_mean_packets
            .insert(phase.name().to_string(), mean(rows.iter().map(|p| p.packets_sent as f64)));
    }

    let mut failure_counts: BTreeMap<String, u64> = BTreeMap::new();
    for r in reports {
        if !r.outcome.is_success() {
            *failure_counts.entry(r.outcome.label()).or_insert(0) += 1;
        }
    }

    MetricsSummary {
        kind: kind.name().to_string(),
        base_seed,
        runs,
        successes,
        success_rate: if runs == 0 { 0.0 } else { successes as f64 / runs as f64 },
        mean_virtual_ms_all: mean(reports.iter().map(|r| r.total_virtual_ms as f64)),
        mean_virtual_ms_success: mean(succ().map(|r| r.total_virtual_ms as f64)),
        median_virtual_ms_success: median(succ().map(|r| r.total_virtual_ms as f64).collect()),
        mean_packets_success: mean(succ().map(|r| r.total_packets as f64)),
        mean_peak_rate_pps: mean(reports.iter().map(|r| r.peak_rate_pps as f64)),
        mean_collision_trials: mean(
            reports.iter().filter(|r| r.collision_trials > 0).map(|r| r.collision_trials as f64),
        ),
        rcv_nxt_exact_count: reports.iter().filter(|r| r.rcv_nxt_exact()).count() as u64,
        snd_una_exact_count: reports.iter().filter(|r| r.snd_una_exact()).count() as u64,
        premature_resets: reports.iter().filter(|r| r.premature_reset).count() as u64,
        tcp_hash_draws_total: reports.iter().map(|r| r.tcp_hash_draws).sum(),
        phase_mean_virtual_ms,
        phase_mean_packets,
        failure_counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank_report(seed: u64, outcome: AttackOutcome, total_ms: u64) -> AttackReport {
        AttackReport {
            kind: ScenarioKind::FullReset,
            seed,
            outcome,
            phases: vec![PhaseReport {
                phase: Phase::Collision,
                virtual_ms: total_ms / 2,
                packets_sent: 100,
                outcome: PhaseOutcome::Success,
                inferred_value: None,
            }],
            total_virtual_ms: total_ms,
            total_packets: 200,
            peak_rate_pps: 300,
            collision_trials: 3,
            link_latency_ms: 10,
            collider_claimed: Some(1),
            collider_truly_shares_counter: true,
            inferred_port: Some(40000),
            true_port: 40000,
            inferred_rcv_nxt: Some(7),
            true_rcv_nxt: Some(7),
            inferred_snd_una: None,
            true_snd_una: None,
            premature_reset: false,
            connection_alive_at_end: false,
            payload_delivered: false,
            df_cleared: true,
            tcp_hash_draws: 5,
            socketless_tcp_fallbacks: 0,
            packets_lost: 0,
            spoof_filtered: 0,
            trace: None,
        }
    }

    #[test]
    fn summary_counts_successes_and_failures() {
        let reports = vec![
            blank_report(1, AttackOutcome::Success, 100),
            blank_report(2, AttackOutcome::Success, 300),
            blank_report(3, AttackOutcome::Failure(FailureReason::PortNotFound), 900),
            blank_report(4, AttackOutcome::Failure(FailureReason::PortNotFound), 900),
            blank_report(5, AttackOutcome::Failure(FailureReason::NoCollision), 900),
        ];
        let s = summarize(ScenarioKind::FullReset, 1, &reports);
        assert_eq!(s.runs, 5);
        assert_eq!(s.successes, 2);
        assert!((s.success_rate - 0.4).abs() < 1e-12);
        assert!((s.mean_virtual_ms_success - 200.0).abs() < 1e-9);
        assert!((s.median_virtual_ms_success - 200.0).abs() < 1e-9);
        assert!((s.mean_virtual_ms_all - 620.0).abs() < 1e-9);
        assert_eq!(s.failure_counts["port_not_found"], 2);
        assert_eq!(s.failure_counts["no_collision"], 1);
        assert_eq!(s.rcv_nxt_exact_count, 5);
        assert_eq!(s.phase_mean_packets["collision"], 100.0);
    }

    #[test]
    fn summary_handles_an_empty_batch() {
        let s = summarize(ScenarioKind::CollisionScan, 9, &[]);
        assert_eq!(s.runs, 0);
        assert_eq!(s.success_rate, 0.0);
        assert!(s.phase_mean_virtual_ms.is_empty());
    }

    #[test]
    fn json_field_names_are_frozen() {
        let s = summarize(ScenarioKind::FullReset, 1, &[blank_report(1, AttackOutcome::Success, 10)]);
        let json = serde_json::to_value(&s).unwrap();
        let obj = json.as_object().unwrap();
        for key in [
            "kind",
            "base_seed",
            "runs",
            "successes",
            "success_rate",
            "mean_virtual_ms_all",
            "mean_virtual_ms_success",
            "median_virtual_ms_success",
            "mean_packets_success",
            "mean_peak_rate_pps",
            "mean_collision_trials",
            "rcv_nxt_exact_count",
            "snd_una_exact_count",
            "premature_resets",
            "tcp_hash_draws_total",
            "phase_mean_virtual_ms",
            "phase_mean_packets",
            "failure_counts",
        ] {
            assert!(obj.contains_key(key), "summary JSON lost field `{key}`");
        }
        assert_eq!(obj.len(), 18, "unexpected summary field added or removed");
    }

    #[test]
    fn outcome_serialization_shape_is_stable() {
        let ok = serde_json::to_string(&AttackOutcome::Success).unwrap();
        assert_eq!(ok, "\"success\"");
        let fail =
            serde_json::to_string(&AttackOutcome::Failure(FailureReason::Timeout(Phase::PortScan)))
                .unwrap();
        assert_eq!(fail, "{\"failure\":{\"timeout\":\"port_scan\"}}");
    }
}
