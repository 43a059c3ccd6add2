//! Benchmark driver: closed-loop clients issuing synchronous batches of
//! fixed-size transfers between two nodes, swept over block size, batch size
//! and tier-2 penalty.
//!
//! Under the virtual clock the clients are stepped in lockstep with the
//! engine, so a run is a pure function of the scenario and seed.

use std::fmt::Write as _;
use std::io;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use railspray_core::batch::{BatchState, FailureReason};
use railspray_core::capability::Direction;
use railspray_core::scheduler::Policy;
use railspray_core::segment::SegmentHandle;
use railspray_core::slice::BatchId;
use railspray_core::topology::{NodeId, Penalty, RailKind, TopologyGraph};
use serde::{Deserialize, Serialize};

use crate::backend::BackendConfig;
use crate::config::{ClockMode, EngineConfig};
use crate::engine::{Engine, EngineError, TransferRequest};
use crate::faults::FaultSchedule;
use crate::memory::MemoryRegion;
use crate::telemetry::TimelineRow;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunLength {
    /// Batches per client.
    Iters(u64),
    /// Clients stop issuing new batches after this many seconds.
    Duration(f64),
}

#[derive(Debug, Clone)]
pub struct Scenario {
    /// Engine settings shared by every cell; the policy lives here.
    pub engine: EngineConfig,
    pub graph: TopologyGraph,
    pub faults: FaultSchedule,
    pub blocks: Vec<u64>,
    pub batches: Vec<usize>,
    /// Tier-2 penalties to sweep; empty keeps the configured one.
    pub penalties: Vec<f64>,
    pub threads: usize,
    pub length: RunLength,
    pub seed: u64,
    pub src_node: NodeId,
    pub dst_node: NodeId,
    /// Give the regions real memory. Virtual-clock runs leave it off so huge
    /// sweeps never touch memory.
    pub real_memory: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("engine stalled at {0} ns with clients waiting")]
    Stalled(u64),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Scenario {
    /// Defaults for `graph`: telemetry policy, virtual clock, one 4 MiB
    /// cell, a single client for 100 batches, first node to last node.
    pub fn new(graph: TopologyGraph) -> Self {
        let last = NodeId(graph.nodes().len().saturating_sub(1) as u32);
        Scenario {
            engine: EngineConfig::default(),
            graph,
            faults: FaultSchedule::empty(),
            blocks: vec![4 << 20],
            batches: vec![1],
            penalties: Vec::new(),
            threads: 1,
            length: RunLength::Iters(100),
            seed: 0,
            src_node: NodeId(0),
            dst_node: last,
            real_memory: false,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::Invalid(m.into()));
        if self.blocks.is_empty() || self.blocks.contains(&0) {
            return bad("block sizes must be positive");
        }
        if self.batches.is_empty() || self.batches.contains(&0) {
            return bad("batch sizes must be positive");
        }
        if self.threads == 0 {
            return bad("at least one submission thread is needed");
        }
        if self.penalties.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return bad("penalties must be positive");
        }
        match self.length {
            RunLength::Iters(0) => return bad("iteration count must be positive"),
            RunLength::Duration(d) if !(d > 0.0 && d.is_finite()) => return bad("duration must be positive"),
            _ => {}
        }
        let n = self.graph.nodes().len() as u32;
        if self.src_node.0 >= n || self.dst_node.0 >= n {
            return bad("unknown source or destination node");
        }
        if !self.faults.is_empty() && self.engine.clock == ClockMode::Real {
            return bad("fault schedules need the virtual clock");
        }
        self.engine.validate().map_err(|e| BenchError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub penalty: f64,
    pub block_bytes: u64,
    pub batch: usize,
    pub threads: usize,
    pub requests: u64,
    pub failures: u64,
    pub bytes: u64,
    pub elapsed_ms: f64,
    pub throughput_gbps: f64,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RailRow {
    pub policy: String,
    pub penalty: f64,
    pub block_bytes: u64,
    pub batch: usize,
    pub threads: usize,
    pub rail: String,
    pub tier: u8,
    pub bytes: u64,
    pub share: f64,
}

/// A timeline row tagged with the summary row it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTimelineRow {
    pub cell: usize,
    pub window_start_ms: u64,
    pub rail_id: String,
    pub bytes_ok: u64,
    pub bytes_failed: u64,
    pub queue_depth_bytes: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub health_state: String,
    pub throughput_gbps: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub summary: Vec<SummaryRow>,
    pub rails: Vec<RailRow>,
    pub timeline: Vec<CellTimelineRow>,
    /// Health transitions per cell: (cell, rail name, time ns, new state).
    pub transitions: Vec<(usize, String, u64, String)>,
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

fn policy_name(p: Policy) -> &'static str {
    match p {
        Policy::Telemetry => "telemetry",
        Policy::RoundRobin => "rr",
        Policy::Hash => "hash",
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    block: u64,
    batch: usize,
    penalty: Option<f64>,
}

#[derive(Debug, Default)]
struct Samples {
    latencies_ns: Vec<u64>,
    failures: u64,
    bytes: u64,
    end_ns: u64,
}

impl Samples {
    fn record(&mut self, start: u64, end: u64, state: BatchState, bytes: u64) {
        self.latencies_ns.push(end - start);
        self.end_ns = self.end_ns.max(end);
        match state {
            BatchState::Failed(_) => self.failures += 1,
            _ => self.bytes += bytes,
        }
    }
}

struct Client {
    index: usize,
    issued: u64,
    current: Option<(BatchId, u64)>,
}

fn cell_config(s: &Scenario, cell: Cell) -> EngineConfig {
    let mut cfg = s.engine.clone();
    if let Some(p) = cell.penalty {
        cfg.scheduler.penalties.tier2 = Penalty::Finite(p);
    }
    let mut sim_index = 0u64;
    for b in &mut cfg.backends {
        if let BackendConfig::Sim { seed, .. } = b {
            *seed = s.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(sim_index);
            sim_index += 1;
        }
    }
    cfg
}

fn requests(cell: Cell, client: usize, handles: (SegmentHandle, SegmentHandle)) -> Vec<TransferRequest> {
    (0..cell.batch)
        .map(|i| {
            let off = ((client * cell.batch + i) as u64) * cell.block;
            TransferRequest {
                src: handles.0,
                src_offset: off,
                dst: handles.1,
                dst_offset: off,
                len: cell.block,
                direction: Direction::Write,
            }
        })
        .collect()
}

fn more(s: &Scenario, issued: u64, now: u64) -> bool {
    match s.length {
        RunLength::Iters(n) => issued < n,
        RunLength::Duration(d) => (now as f64) < d * 1e9,
    }
}

fn run_cell(s: &Scenario, cell: Cell) -> Result<(Engine, Samples), BenchError> {
    let e = Engine::new(cell_config(s, cell), s.graph.clone(), s.faults.clone())?;
    let span = (s.threads * cell.batch) as u64 * cell.block;
    let region = |len: u64| {
        if s.real_memory {
            MemoryRegion::zeroed(len as usize)
        } else {
            MemoryRegion::virtual_region(len as usize)
        }
    };
    let src_name = &s.graph.node(s.src_node).name;
    let dst_name = &s.graph.node(s.dst_node).name;
    let src = e.register_memory("bench/src", src_name, None, region(span))?;
    let dst = e.register_memory("bench/dst", dst_name, None, region(span))?;
    let bytes_per_batch = cell.block * cell.batch as u64;

    if e.is_virtual() {
        let mut samples = Samples::default();
        let mut clients: Vec<Client> = (0..s.threads)
            .map(|index| Client {
                index,
                issued: 0,
                current: None,
            })
            .collect();
        for c in &mut clients {
            let b = e.allocate_batch();
            e.submit_transfers(b, &requests(cell, c.index, (src, dst)))?;
            c.current = Some((b, 0));
            c.issued = 1;
        }
        loop {
            let wake = e.pump();
            let now = e.now_ns();
            let mut resubmitted = false;
            for c in &mut clients {
                let Some((b, t0)) = c.current else { continue };
                let st = e.batch_status(b)?;
                if st.state == BatchState::InFlight {
                    continue;
                }
                samples.record(t0, now, st.state, bytes_per_batch);
                c.current = None;
                if st.remaining_units == 0 {
                    e.free_batch(b)?;
                }
                if more(s, c.issued, now) {
                    let b = e.allocate_batch();
                    e.submit_transfers(b, &requests(cell, c.index, (src, dst)))?;
                    c.current = Some((b, now));
                    c.issued += 1;
                    resubmitted = true;
                }
            }
            if clients.iter().all(|c| c.current.is_none()) {
                break;
            }
            if !resubmitted && !e.advance_after(wake) {
                return Err(BenchError::Stalled(now));
            }
        }
        Ok((e, samples))
    } else {
        let samples = Mutex::new(Samples::default());
        let engine = Arc::new(e);
        std::thread::scope(|scope| -> Result<(), BenchError> {
            let mut handles = Vec::new();
            for index in 0..s.threads {
                let engine = engine.clone();
                let samples = &samples;
                handles.push(scope.spawn(move || -> Result<(), BenchError> {
                    let mut issued = 0;
                    while more(s, issued, engine.now_ns()) {
                        let t0 = engine.now_ns();
                        let b = engine.allocate_batch();
                        engine.submit_transfers(b, &requests(cell, index, (src, dst)))?;
                        let st = engine.wait(b, Duration::from_secs(120))?;
                        let st = if st.state == BatchState::InFlight {
                            BatchState::Failed(FailureReason::NoHealthyRail)
                        } else {
                            st.state
                        };
                        samples.lock().record(t0, engine.now_ns(), st, bytes_per_batch);
                        let _ = engine.free_batch(b);
                        issued += 1;
                    }
                    Ok(())
                }));
            }
            for h in handles {
                h.join().expect("client thread panicked")?;
            }
            Ok(())
        })?;
        let e = Arc::try_unwrap(engine).expect("clients joined");
        Ok((e, samples.into_inner()))
    }
}

pub fn run(s: &Scenario) -> Result<Report, BenchError> {
    s.validate()?;
    let penalties: Vec<Option<f64>> = if s.penalties.is_empty() {
        vec![None]
    } else {
        s.penalties.iter().map(|p| Some(*p)).collect()
    };
    let policy = policy_name(s.engine.policy).to_string();
    let mut report = Report::default();
    for &penalty in &penalties {
        for &block in &s.blocks {
            for &batch in &s.batches {
                let cell = Cell { block, batch, penalty };
                let (e, mut samples) = run_cell(s, cell)?;
                let index = report.summary.len();
                samples.latencies_ns.sort_unstable();
                let lat = &samples.latencies_ns;
                let mean_ns = if lat.is_empty() {
                    0.0
                } else {
                    lat.iter().map(|v| *v as f64).sum::<f64>() / lat.len() as f64
                };
                let elapsed = samples.end_ns.max(1);
                let penalty_value = match e.config().scheduler.penalties.tier2 {
                    Penalty::Finite(p) => p,
                    Penalty::Unschedulable => f64::INFINITY,
                };
                report.summary.push(SummaryRow {
                    policy: policy.clone(),
                    penalty: penalty_value,
                    block_bytes: block,
                    batch,
                    threads: s.threads,
                    requests: lat.len() as u64,
                    failures: samples.failures,
                    bytes: samples.bytes,
                    elapsed_ms: elapsed as f64 / 1e6,
                    throughput_gbps: samples.bytes as f64 * 8.0 / elapsed as f64,
                    mean_us: mean_ns / 1e3,
                    p50_us: percentile(lat, 0.50) as f64 / 1e3,
                    p90_us: percentile(lat, 0.90) as f64 / 1e3,
                    p99_us: percentile(lat, 0.99) as f64 / 1e3,
                });
                let snap = e.telemetry().snapshot();
                let nic: Vec<_> = snap
                    .rails
                    .iter()
                    .filter(|r| e.graph().rail(r.rail).kind == RailKind::Nic)
                    .collect();
                let total: u64 = nic.iter().map(|r| r.bytes_ok).sum();
                for r in nic {
                    report.rails.push(RailRow {
                        policy: policy.clone(),
                        penalty: penalty_value,
                        block_bytes: block,
                        batch,
                        threads: s.threads,
                        rail: r.name.clone(),
                        tier: e.graph().rail(r.rail).tier.number(),
                        bytes: r.bytes_ok,
                        share: if total == 0 { 0.0 } else { r.bytes_ok as f64 / total as f64 },
                    });
                    for (t, state) in &r.transitions {
                        report.transitions.push((index, r.name.clone(), *t, state.as_str().to_string()));
                    }
                }
                let rows = e.telemetry().timeline(e.config().telemetry_window_ms, None);
                report.timeline.extend(rows.into_iter().map(|r| tag(index, r)));
            }
        }
    }
    Ok(report)
}

fn tag(cell: usize, r: TimelineRow) -> CellTimelineRow {
    CellTimelineRow {
        cell,
        window_start_ms: r.window_start_ms,
        rail_id: r.rail_id,
        bytes_ok: r.bytes_ok,
        bytes_failed: r.bytes_failed,
        queue_depth_bytes: r.queue_depth_bytes,
        p50_us: r.p50_us,
        p99_us: r.p99_us,
        health_state: r.health_state,
        throughput_gbps: r.throughput_gbps,
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

impl Report {
    /// Writes `summary.csv`, `rails.csv` and `timeline.csv` into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<(), BenchError> {
        std::fs::create_dir_all(dir)?;
        write_csv(&dir.join("summary.csv"), &self.summary)?;
        write_csv(&dir.join("rails.csv"), &self.rails)?;
        write_csv(&dir.join("timeline.csv"), &self.timeline)?;
        Ok(())
    }

    /// Aggregate throughput per timeline window of one cell, in Gbit/s.
    pub fn throughput_trace(&self, cell: usize) -> Vec<(u64, f64)> {
        let mut out: Vec<(u64, f64)> = Vec::new();
        for r in self.timeline.iter().filter(|r| r.cell == cell) {
            match out.iter_mut().find(|(t, _)| *t == r.window_start_ms) {
                Some(x) => x.1 += r.throughput_gbps,
                None => out.push((r.window_start_ms, r.throughput_gbps)),
            }
        }
        out.sort_by_key(|x| x.0);
        out
    }

    /// Byte share of tier-1 rails in one cell.
    pub fn tier1_share(&self, cell: usize) -> f64 {
        let row = &self.summary[cell];
        self.rails
            .iter()
            .filter(|r| r.block_bytes == row.block_bytes && r.batch == row.batch && r.penalty == row.penalty && r.tier == 1)
            .map(|r| r.share)
            .sum()
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>10} {:>6} {:>7} {:>8} {:>9} {:>11} {:>10} {:>10} {:>10} {:>10}",
            "policy", "penalty", "block", "batch", "threads", "requests", "failures", "Gbit/s", "mean us", "p50 us", "p90 us", "p99 us"
        );
        for r in &self.summary {
            let _ = writeln!(
                out,
                "{:<10} {:>8} {:>10} {:>6} {:>7} {:>8} {:>9} {:>11.3} {:>10.1} {:>10.1} {:>10.1} {:>10.1}",
                r.policy,
                r.penalty,
                human_bytes(r.block_bytes),
                r.batch,
                r.threads,
                r.requests,
                r.failures,
                r.throughput_gbps,
                r.mean_us,
                r.p50_us,
                r.p90_us,
                r.p99_us
            );
        }
        out
    }
}

pub fn human_bytes(b: u64) -> String {
    const UNITS: [(u64, &str); 3] = [(1 << 30, "GiB"), (1 << 20, "MiB"), (1 << 10, "KiB")];
    for (size, unit) in UNITS {
        if b >= size && b % size == 0 {
            return format!("{}{unit}", b / size);
        }
    }
    format!("{b}B")
}

/// Parses `4096`, `64K`, `4MiB`, `1g` and similar.
pub fn parse_bytes(text: &str) -> Option<u64> {
    let t = text.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: u64 = num.parse().ok()?;
    let mult = match unit.to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kb" | "kib" => 1 << 10,
        "m" | "mb" | "mib" => 1 << 20,
        "g" | "gb" | "gib" => 1 << 30,
        _ => return None,
    };
    n.checked_mul(mult)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 0.5), 50);
        assert_eq!(percentile(&v, 0.99), 99);
        assert_eq!(percentile(&v, 1.0), 100);
        assert_eq!(percentile(&[7], 0.99), 7);
        assert_eq!(percentile(&[], 0.5), 0);
    }

    #[test]
    fn byte_sizes() {
        assert_eq!(parse_bytes("4096"), Some(4096));
        assert_eq!(parse_bytes("64K"), Some(65536));
        assert_eq!(parse_bytes("4MiB"), Some(4 << 20));
        assert_eq!(parse_bytes("1g"), Some(1 << 30));
        assert_eq!(parse_bytes("3x"), None);
        assert_eq!(human_bytes(4 << 20), "4MiB");
        assert_eq!(human_bytes(1000), "1000B");
    }
}
