use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{ArgGroup, Parser, ValueEnum};
use railspray::bench::{parse_bytes, run, RunLength, Scenario};
use railspray::config::{default_real_backends, default_sim_backends, load_faults, load_topology, ClockMode, EngineConfig};
use railspray_core::scheduler::Policy;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Rr,
    Hash,
    Telemetry,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ClockArg {
    Virtual,
    Real,
}

/// Closed-loop transfer benchmark over a multi-rail fabric.
#[derive(Debug, Parser)]
#[command(name = "railbench", version)]
#[command(group(ArgGroup::new("length").args(["duration", "iters"])))]
struct Args {
    /// Fabric topology (TOML).
    #[arg(long)]
    fabric: PathBuf,
    #[arg(long, value_enum, default_value = "telemetry")]
    policy: PolicyArg,
    /// Block sizes, comma separated (e.g. 64K,4M,64M).
    #[arg(long, value_delimiter = ',', default_value = "4M")]
    block: Vec<String>,
    /// Transfers per batch, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    batch: Vec<usize>,
    /// Concurrent submitting clients.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Seconds each client keeps submitting (virtual seconds under the virtual clock).
    #[arg(long)]
    duration: Option<f64>,
    /// Batches per client.
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fault schedule (TOML); virtual clock only.
    #[arg(long)]
    faults: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "virtual")]
    clock: ClockArg,
    /// Output directory for summary.csv, rails.csv and timeline.csv.
    #[arg(long, default_value = "bench-out")]
    out: PathBuf,
    /// Engine config (TOML) to start from; its topology and fault entries are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tier-2 score penalties to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    penalty: Vec<f64>,
    /// Probe interval for excluded rails, milliseconds.
    #[arg(long)]
    probe_interval_ms: Option<u64>,
    /// Worker count; 0 gives each rail its own worker.
    #[arg(long)]
    workers: Option<usize>,
}

fn scenario(args: &Args) -> anyhow::Result<Scenario> {
    let graph = load_topology(&args.fabric).with_context(|| format!("loading {}", args.fabric.display()))?;
    let mut engine = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            EngineConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => EngineConfig::default(),
    };
    engine.topology = None;
    engine.faults = None;
    engine.policy = match args.policy {
        PolicyArg::Rr => Policy::RoundRobin,
        PolicyArg::Hash => Policy::Hash,
        PolicyArg::Telemetry => Policy::Telemetry,
    };
    let real = matches!(args.clock, ClockArg::Real);
    if args.config.is_none() || engine.clock != if real { ClockMode::Real } else { ClockMode::Virtual } {
        engine.backends = if real { default_real_backends() } else { default_sim_backends() };
    }
    engine.clock = if real { ClockMode::Real } else { ClockMode::Virtual };
    if let Some(ms) = args.probe_interval_ms {
        engine.health.probe_interval_ms = ms;
    }
    if let Some(w) = args.workers {
        engine.workers = w;
    }
    let faults = match &args.faults {
        Some(p) => load_faults(p, &graph).with_context(|| format!("loading {}", p.display()))?,
        None => railspray::faults::FaultSchedule::empty(),
    };
    let mut blocks = Vec::new();
    for b in &args.block {
        match parse_bytes(b) {
            Some(v) => blocks.push(v),
            None => bail!("bad block size `{b}`"),
        }
    }
    let mut s = Scenario::new(graph);
    s.engine = engine;
    s.faults = faults;
    s.blocks = blocks;
    s.batches = args.batch.clone();
    s.penalties = args.penalty.clone();
    s.threads = args.threads;
    s.length = match (args.duration, args.iters) {
        (Some(d), _) => RunLength::Duration(d),
        (None, Some(n)) => RunLength::Iters(n),
        (None, None) => RunLength::Iters(100),
    };
    s.seed = args.seed;
    s.real_memory = real;
    Ok(s)
}

fn main() -> ExitCode {
    env_logger::init();
    let args = Args::parse();
    let result = scenario(&args).and_then(|s| {
        let report = run(&s)?;
        report.write_csvs(&args.out)?;
        print!("{}", report.table());
        for (cell, rail, t, state) in &report.transitions {
            println!("cell {cell}: {rail} -> {state} at {:.3} ms", *t as f64 / 1e6);
        }
        Ok(report)
    });
    match result {
        Ok(r) if r.summary.iter().any(|row| row.failures > 0) => {
            eprintln!("railbench: some batches failed");
            ExitCode::from(1)
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("railbench: {e:#}");
            ExitCode::from(2)
        }
    }
}
