//! Per-rail counters, latency histograms and the timeline CSV.
//!
//! Completions are binned into fixed base windows (10 ms by default). Export
//! merges base windows into the requested width and emits one row per rail
//! per window, carrying health and queue depth forward across quiet windows.

use std::collections::BTreeMap;
use std::io;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::Mutex;
use railspray_core::resilience::HealthState;
use railspray_core::topology::{RailId, TopologyGraph};
use serde::{Deserialize, Serialize};

const SUB_BUCKETS: f64 = 4.0;
const MIN_NS: f64 = 1_000.0;
const MAX_NS: f64 = 10_000_000_000.0;

/// Log-bucketed latency histogram covering 1 us to 10 s with four buckets
/// per power of two.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    counts: Vec<u64>,
    total: u64,
}

fn bucket_count() -> usize {
    ((MAX_NS / MIN_NS).log2() * SUB_BUCKETS).ceil() as usize + 1
}

impl Default for Histogram {
    fn default() -> Self {
        Self::new()
    }
}

impl Histogram {
    pub fn new() -> Self {
        Histogram {
            counts: vec![0; bucket_count()],
            total: 0,
        }
    }

    fn index(ns: u64) -> usize {
        let v = (ns as f64).clamp(MIN_NS, MAX_NS);
        ((v / MIN_NS).log2() * SUB_BUCKETS).floor() as usize
    }

    /// Upper edge of bucket `i`, in nanoseconds.
    fn upper(i: usize) -> f64 {
        (MIN_NS * ((i + 1) as f64 / SUB_BUCKETS).exp2()).min(MAX_NS)
    }

    pub fn record(&mut self, ns: u64) {
        self.counts[Self::index(ns)] += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
    }

    pub fn count(&self) -> u64 {
        self.total
    }

    /// Nearest-rank quantile, reported as the upper edge of its bucket in
    /// microseconds. Zero when empty.
    pub fn quantile_us(&self, q: f64) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let rank = ((q * self.total as f64).ceil() as u64).clamp(1, self.total);
        let mut seen = 0;
        for (i, c) in self.counts.iter().enumerate() {
            seen += c;
            if seen >= rank {
                return Self::upper(i) / 1e3;
            }
        }
        MAX_NS / 1e3
    }
}

#[derive(Debug, Clone, Default)]
struct WindowStats {
    bytes_ok: u64,
    bytes_failed: u64,
    queue_depth: Option<f64>,
    hist: Histogram,
}

#[derive(Debug, Default)]
struct RailStats {
    hist: Histogram,
    transitions: Vec<(u64, HealthState)>,
    windows: BTreeMap<u64, WindowStats>,
}

#[derive(Debug, Default)]
struct Totals {
    posted: AtomicU64,
    ok: AtomicU64,
    failed: AtomicU64,
    probe: AtomicU64,
}

#[derive(Debug)]
pub struct Telemetry {
    names: Vec<String>,
    base_window_ns: u64,
    enabled: AtomicBool,
    totals: Vec<Totals>,
    stats: Vec<Mutex<RailStats>>,
}

/// One line of the timeline CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
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

#[derive(Debug, Clone, PartialEq)]
pub struct RailSummary {
    pub rail: RailId,
    pub name: String,
    pub bytes_posted: u64,
    pub bytes_ok: u64,
    pub bytes_failed: u64,
    pub probe_bytes: u64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub health: HealthState,
    pub transitions: Vec<(u64, HealthState)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TelemetrySnapshot {
    pub rails: Vec<RailSummary>,
}

impl TelemetrySnapshot {
    pub fn rail(&self, name: &str) -> Option<&RailSummary> {
        self.rails.iter().find(|r| r.name == name)
    }

    pub fn total_bytes_ok(&self) -> u64 {
        self.rails.iter().map(|r| r.bytes_ok).sum()
    }
}

pub const DEFAULT_WINDOW_NS: u64 = 10_000_000;

impl Telemetry {
    pub fn new(graph: &TopologyGraph, base_window_ns: u64) -> Self {
        let n = graph.rails().len();
        Telemetry {
            names: graph.rails().iter().map(|r| r.name.clone()).collect(),
            base_window_ns: base_window_ns.max(1),
            enabled: AtomicBool::new(true),
            totals: (0..n).map(|_| Totals::default()).collect(),
            stats: (0..n).map(|_| Mutex::new(RailStats::default())).collect(),
        }
    }

    /// Turns histogram and window collection on or off. Byte totals and
    /// health transitions are always kept.
    pub fn set_enabled(&self, on: bool) {
        self.enabled.store(on, Ordering::Release);
    }

    pub fn enabled(&self) -> bool {
        self.enabled.load(Ordering::Acquire)
    }

    fn window(&self, now: u64) -> u64 {
        now / self.base_window_ns
    }

    pub fn record_post(&self, rail: RailId, bytes: u64) {
        self.totals[rail.index()].posted.fetch_add(bytes, Ordering::Relaxed);
    }

    pub fn record_probe(&self, rail: RailId, bytes: u64) {
        self.totals[rail.index()].probe.fetch_add(bytes, Ordering::Relaxed);
    }

    /// A slice finished on `rail`. `queue_depth` is the rail's queued bytes
    /// after the completion was accounted.
    pub fn record_completion(&self, rail: RailId, bytes: u64, ok: bool, latency_ns: u64, now: u64, queue_depth: f64) {
        let t = &self.totals[rail.index()];
        if ok {
            t.ok.fetch_add(bytes, Ordering::Relaxed);
        } else {
            t.failed.fetch_add(bytes, Ordering::Relaxed);
        }
        if !self.enabled() {
            return;
        }
        let mut s = self.stats[rail.index()].lock();
        if ok {
            s.hist.record(latency_ns);
        }
        let w = s.windows.entry(self.window(now)).or_default();
        if ok {
            w.bytes_ok += bytes;
            w.hist.record(latency_ns);
        } else {
            w.bytes_failed += bytes;
        }
        w.queue_depth = Some(queue_depth);
    }

    pub fn record_queue(&self, rail: RailId, now: u64, queue_depth: f64) {
        if !self.enabled() {
            return;
        }
        let mut s = self.stats[rail.index()].lock();
        s.windows.entry(self.window(now)).or_default().queue_depth = Some(queue_depth);
    }

    pub fn record_health(&self, rail: RailId, now: u64, state: HealthState) {
        self.stats[rail.index()].lock().transitions.push((now, state));
    }

    pub fn snapshot(&self) -> TelemetrySnapshot {
        let rails = (0..self.names.len())
            .map(|i| {
                let s = self.stats[i].lock();
                let t = &self.totals[i];
                RailSummary {
                    rail: RailId(i as u32),
                    name: self.names[i].clone(),
                    bytes_posted: t.posted.load(Ordering::Relaxed),
                    bytes_ok: t.ok.load(Ordering::Relaxed),
                    bytes_failed: t.failed.load(Ordering::Relaxed),
                    probe_bytes: t.probe.load(Ordering::Relaxed),
                    p50_us: s.hist.quantile_us(0.5),
                    p99_us: s.hist.quantile_us(0.99),
                    health: s.transitions.last().map_or(HealthState::Healthy, |x| x.1),
                    transitions: s.transitions.clone(),
                }
            })
            .collect();
        TelemetrySnapshot { rails }
    }

    /// Timeline rows for windows of `window_ms`, covering every window up to
    /// the last one with recorded activity. `rails` restricts the output.
    pub fn timeline(&self, window_ms: u64, rails: Option<&[RailId]>) -> Vec<TimelineRow> {
        let width = (window_ms.max(1) * 1_000_000).div_ceil(self.base_window_ns).max(1);
        let window_ns = width * self.base_window_ns;
        let chosen: Vec<usize> = match rails {
            Some(r) => r.iter().map(|r| r.index()).collect(),
            None => (0..self.names.len()).collect(),
        };
        let locked: Vec<_> = chosen.iter().map(|&i| (i, self.stats[i].lock())).collect();
        let last = locked
            .iter()
            .filter_map(|(_, s)| s.windows.keys().next_back().copied())
            .max();
        let Some(last) = last else {
            return Vec::new();
        };
        let n_windows = last / width + 1;
        let mut rows = Vec::with_capacity(n_windows as usize * locked.len());
        let mut depth = vec![0.0f64; locked.len()];
        for w in 0..n_windows {
            let (lo, hi) = (w * width, (w + 1) * width);
            let end_ns = hi * self.base_window_ns;
            for (k, (i, s)) in locked.iter().enumerate() {
                let mut ok = 0;
                let mut failed = 0;
                let mut hist = Histogram::new();
                for (_, ws) in s.windows.range(lo..hi) {
                    ok += ws.bytes_ok;
                    failed += ws.bytes_failed;
                    hist.merge(&ws.hist);
                    if let Some(d) = ws.queue_depth {
                        depth[k] = d;
                    }
                }
                let health = s
                    .transitions
                    .iter()
                    .take_while(|(t, _)| *t < end_ns)
                    .last()
                    .map_or(HealthState::Healthy, |x| x.1);
                rows.push(TimelineRow {
                    window_start_ms: lo * self.base_window_ns / 1_000_000,
                    rail_id: self.names[*i].clone(),
                    bytes_ok: ok,
                    bytes_failed: failed,
                    queue_depth_bytes: depth[k],
                    p50_us: hist.quantile_us(0.5),
                    p99_us: hist.quantile_us(0.99),
                    health_state: health.as_str().to_string(),
                    throughput_gbps: ok as f64 * 8.0 / window_ns as f64,
                });
            }
        }
        rows
    }
}

pub fn write_timeline_csv<W: io::Write>(out: W, rows: &[TimelineRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_timeline_csv<R: io::Read>(input: R) -> Result<Vec<TimelineRow>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}
