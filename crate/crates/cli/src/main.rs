//! Command-line harness: load a scenario, run it (once or as a seeded
//! batch), and write the JSON summary plus an optional event trace.
//!
//! Exit code reflects whether the *harness* worked, not whether the
//! simulated attack succeeded — failed attacks are valid results.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ipidsim_core::{
    run_scenario, summarize, AttackReport, Phase, RunOptions, ScenarioConfig,
};

/// Environment variable naming the directory that receives default-named
/// outputs and relative output paths.
const OUT_DIR_ENV: &str = "IPIDSIM_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "ipidsim",
    version,
    about = "Deterministic simulator of off-path TCP attacks via shared IPID counters"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write a JSON summary (and optionally a trace).
    Run(RunArgs),
    /// Check that a config parses and is internally consistent.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario description (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Base seed; overrides the config's `seed` field.
    #[arg(long)]
    seed: Option<u64>,
    /// Independent runs, seeded base, base+1, ... Reports aggregate into
    /// one summary.
    #[arg(long, default_value_t = 1)]
    runs: u32,
    /// Write the event trace to this file (single-run only; relative paths
    /// land in the output directory).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Summary destination; defaults to `summary.json` in the output
    /// directory.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Stop each run after this phase (downgrade, collision, port_scan,
    /// seq_inference, challenge_window, exact_seq, ack_inference, execute).
    #[arg(long)]
    phase: Option<String>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Scenario description (TOML).
    #[arg(long)]
    config: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(args) => cmd_run(&args),
        Cmd::Validate(args) => cmd_validate(&args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

/// Where default-named and relative outputs go: `$IPIDSIM_OUT_DIR`, or the
/// current directory when unset.
fn out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from("."), PathBuf::from)
}

/// Resolve a user-supplied output path against the output directory;
/// absolute paths are taken as given.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        out_dir().join(path)
    }
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating output directory {}", parent.display()))?;
        }
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn print_run_line(report: &AttackReport) {
    let last_phase =
        report.phases.last().map_or_else(|| "none".to_string(), |p| p.phase.name().to_string());
    println!(
        "run seed={} outcome={} virtual_ms={} packets={} last_phase={}",
        report.seed,
        report.outcome.label(),
        report.total_virtual_ms,
        report.total_packets,
        last_phase,
    );
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = ScenarioConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if args.runs == 0 {
        bail!("--runs must be at least 1");
    }
    if args.trace.is_some() && args.runs != 1 {
        bail!("--trace records a single run; drop it or use --runs 1");
    }
    let stop_after = match &args.phase {
        None => None,
        Some(name) => {
            let phase: Phase = name.parse().map_err(|e: String| anyhow::anyhow!(e))?;
            if !cfg.kind.phases().contains(&phase) {
                bail!(
                    "phase `{}` is not part of a {} run (phases: {})",
                    name,
                    cfg.kind.name(),
                    cfg.kind.phases().iter().map(|p| p.name()).collect::<Vec<_>>().join(", ")
                );
            }
            Some(phase)
        }
    };

    let base_seed = args.seed.unwrap_or(cfg.seed);
    let opts = RunOptions { trace: args.trace.is_some(), stop_after };
    let reports = if args.runs == 1 {
        vec![run_scenario(&cfg, base_seed, &opts)]
    } else {
        ipidsim_core::run_batch_with(&cfg, base_seed, args.runs, &opts)
    };

    for report in &reports {
        print_run_line(report);
    }

    if let Some(trace_path) = &args.trace {
        let path = resolve_out(trace_path);
        let text = reports[0].trace.as_deref().expect("trace recording was requested");
        write_output(&path, text.as_bytes())?;
        println!("trace written to {}", path.display());
    }

    let summary = summarize(cfg.kind, base_seed, &reports);
    let summary_path = args
        .summary
        .as_deref()
        .map_or_else(|| out_dir().join("summary.json"), resolve_out);
    let mut json = serde_json::to_vec_pretty(&summary).context("serializing summary")?;
    json.push(b'\n');
    write_output(&summary_path, &json)?;
    println!(
        "summary: {}/{} runs succeeded ({:.1}%), written to {}",
        summary.successes,
        summary.runs,
        summary.success_rate * 100.0,
        summary_path.display()
    );
    Ok(())
}

fn cmd_validate(args: &ValidateArgs) -> Result<()> {
    let cfg = ScenarioConfig::load(&args.config)
        .with_context(|| format!("validating {}", args.config.display()))?;
    println!(
        "config OK: kind={} seed={} pool={} policy={:?} port_range={}..={}",
        cfg.kind.name(),
        cfg.seed,
        cfg.topology.attacker_pool_size,
        cfg.victim.ipid_policy,
        cfg.attacker.port_range_min,
        cfg.attacker.port_range_max,
    );
    Ok(())
}
