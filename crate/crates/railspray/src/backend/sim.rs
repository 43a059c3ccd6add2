//! Simulated fabric.
//!
//! Each rail is a FIFO server: a slice starts when the rail frees up, takes
//! `len / B_eff` plus jitter and stalls, and completes one link latency
//! later. At most `window` slices may be outstanding per rail. Data really
//! moves (at completion time) unless a side is a virtual region, so byte
//! checks work against the simulated timing.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use railspray_core::capability::{BackendCapabilities, BackendId, Direction, MediaPair};
use railspray_core::segment::Segment;
use railspray_core::slice::{BatchId, CompletionEvent, CompletionStatus, SliceWorkRequest, WorkId};
use railspray_core::topology::{RailId, RailKind};

use super::{check_requests, Backend, BackendContext, FatalBackendError, PostError};
use crate::faults::FaultSchedule;
use crate::memory::MemoryRegion;
use crate::segments::Backing;

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub name: String,
    pub rail_kind: RailKind,
    pub media: Vec<MediaPair>,
    /// Defaults to true for intra rails and false for NIC rails.
    pub intra_node: Option<bool>,
    pub window: u32,
    pub seed: u64,
}

struct Copy {
    src: MemoryRegion,
    src_off: usize,
    dst: MemoryRegion,
    dst_off: usize,
    len: usize,
}

struct SimEvent {
    at: u64,
    seq: u64,
    work: WorkId,
    batch: BatchId,
    status: CompletionStatus,
    posted_at: u64,
    bytes: u64,
    dropped: bool,
    copy: Option<Copy>,
}

impl PartialEq for SimEvent {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}
impl Eq for SimEvent {}
impl PartialOrd for SimEvent {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for SimEvent {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(o.at, o.seq))
    }
}

struct SimRail {
    busy_until: u64,
    outstanding: u32,
    rng: ChaCha8Rng,
    events: BinaryHeap<Reverse<SimEvent>>,
}

pub struct SimBackend {
    caps: BackendCapabilities,
    ctx: BackendContext,
    faults: FaultSchedule,
    window: u32,
    rails: Vec<Mutex<SimRail>>,
    seq: AtomicU64,
    fatal: AtomicBool,
}

impl std::fmt::Debug for SimBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimBackend").field("name", &self.caps.name).finish()
    }
}

fn us(x: f64) -> f64 {
    x * 1e3
}

impl SimBackend {
    pub fn new(id: BackendId, opts: SimOptions, ctx: BackendContext, faults: FaultSchedule) -> Self {
        let intra_node = opts.intra_node.unwrap_or(opts.rail_kind != RailKind::Nic);
        let caps = BackendCapabilities {
            id,
            name: opts.name,
            media: opts.media,
            directions: vec![Direction::Read, Direction::Write],
            rail_kind: opts.rail_kind,
            cross_node: opts.rail_kind == RailKind::Nic,
            intra_node,
            max_post_bytes: u64::MAX,
            batched_post: true,
        };
        let rails = (0..ctx.graph.rails().len())
            .map(|r| {
                Mutex::new(SimRail {
                    busy_until: 0,
                    outstanding: 0,
                    rng: ChaCha8Rng::seed_from_u64(opts.seed ^ (r as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
                    events: BinaryHeap::new(),
                })
            })
            .collect();
        SimBackend {
            caps,
            ctx,
            faults,
            window: opts.window,
            rails,
            seq: AtomicU64::new(0),
            fatal: AtomicBool::new(false),
        }
    }

    fn schedule(&self, rail: &mut SimRail, r: &SliceWorkRequest, copy: Option<Copy>, now: u64) {
        let graph = &self.ctx.graph;
        let info = graph.rail(r.pair.local);
        let start = now.max(rail.busy_until);
        let degrade = self.faults.degrade_at(r.pair.local, start)
            * if r.pair.remote != r.pair.local {
                self.faults.degrade_at(r.pair.remote, start)
            } else {
                1.0
            };
        let bw = info.bandwidth / info.sim.service_factor * degrade;
        // Fixed draws per slice regardless of parameters keep streams aligned.
        let u_jitter: f64 = rail.rng.random();
        let u_stall: f64 = rail.rng.random();
        let u_delay: f64 = rail.rng.random();
        let jitter_max = info.sim.jitter_us + self.faults.jitter_at(r.pair.local, start);
        let mut service = r.len as f64 / bw * 1e9 + us(jitter_max) * u_jitter;
        if u_stall < info.sim.stall_prob {
            service += us(info.sim.stall_us);
        }
        let tx_end = start + (service.round() as u64).max(1);
        let latency = us(info.sim.latency_us).round() as u64;
        let late = if u_delay < info.sim.delay_prob {
            us(info.sim.delay_us).round() as u64
        } else {
            0
        };
        let down = [r.pair.local, r.pair.remote]
            .iter()
            .filter_map(|&x| self.faults.first_down(x, start, tx_end))
            .min();
        let (at, status, copy, dropped) = match down {
            Some(t) => {
                rail.busy_until = t;
                (t + latency, CompletionStatus::Failed, None, false)
            }
            None => {
                rail.busy_until = tx_end;
                let at = tx_end + latency + late;
                let dropped = self.faults.drops_at(r.pair.local, at) || self.faults.drops_at(r.pair.remote, at);
                (at, CompletionStatus::Ok, copy, dropped)
            }
        };
        rail.outstanding += 1;
        rail.events.push(Reverse(SimEvent {
            at,
            seq: self.seq.fetch_add(1, Ordering::Relaxed),
            work: r.work,
            batch: r.batch,
            status,
            posted_at: now,
            bytes: r.len,
            dropped,
            copy,
        }));
    }
}

impl Backend for SimBackend {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    fn attach_segment(&self, segment: &Segment, backing: &Backing) -> Option<Vec<u8>> {
        (backing.memory().is_some() && self.caps.serves_medium(segment.medium())).then(Vec::new)
    }

    fn post_slices(&self, reqs: &[SliceWorkRequest]) -> Result<usize, PostError> {
        if self.is_fatal() {
            return Err(FatalBackendError(self.caps.name.clone()).into());
        }
        let snap = self.ctx.segments.snapshot();
        check_requests(&self.caps, &snap, reqs)?;
        let now = self.ctx.clock.now_ns();
        for (i, r) in reqs.iter().enumerate() {
            let mut rail = self.rails[r.pair.local.index()].lock();
            if rail.outstanding >= self.window {
                return Ok(i);
            }
            let src = snap.backing(r.src).and_then(|b| b.memory());
            let dst = snap.backing(r.dst).and_then(|b| b.memory());
            let copy = match (src, dst) {
                (Some(s), Some(d)) if !s.is_virtual() && !d.is_virtual() => Some(Copy {
                    src: s.clone(),
                    src_off: r.src_offset as usize,
                    dst: d.clone(),
                    dst_off: r.dst_offset as usize,
                    len: r.len as usize,
                }),
                _ => None,
            };
            self.schedule(&mut rail, r, copy, now);
        }
        Ok(reqs.len())
    }

    fn poll(&self, rail_id: RailId, max: usize, out: &mut Vec<CompletionEvent>) -> usize {
        let Some(cell) = self.rails.get(rail_id.index()) else {
            return 0;
        };
        let now = self.ctx.clock.now_ns();
        let fatal = self.is_fatal();
        let mut rail = cell.lock();
        let mut n = 0;
        while n < max {
            match rail.events.peek() {
                Some(Reverse(e)) if e.at <= now => {}
                _ => break,
            }
            let Reverse(e) = rail.events.pop().expect("peeked");
            rail.outstanding -= 1;
            let mut status = e.status;
            if fatal {
                status = CompletionStatus::Failed;
            } else if let Some(c) = &e.copy {
                MemoryRegion::copy(&c.src, c.src_off, &c.dst, c.dst_off, c.len);
            }
            if e.dropped && !fatal {
                continue;
            }
            out.push(CompletionEvent {
                work: e.work,
                batch: e.batch,
                rail: rail_id,
                status,
                completed_at_ns: e.at,
                service_ns: e.at - e.posted_at,
                bytes: e.bytes,
            });
            n += 1;
        }
        n
    }

    fn next_event_ns(&self) -> Option<u64> {
        self.rails
            .iter()
            .filter_map(|r| r.lock().events.peek().map(|Reverse(e)| e.at))
            .min()
    }

    fn is_fatal(&self) -> bool {
        self.fatal.load(Ordering::Acquire)
    }

    fn latch_fatal(&self) {
        self.fatal.store(true, Ordering::Release);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::faults::{Fault, FaultEffect};
    use crate::segments::SegmentStore;
    use railspray_core::reachability::RailPair;
    use railspray_core::segment::{BufferDesc, Medium, SegmentDesc, SegmentHandle};
    use railspray_core::slice::SliceId;
    use railspray_core::topology::{Affinity, NodeSpec, RailSpec, SimLinkParams, TopologyGraph, TopologySpec};
    use std::sync::Arc;

    struct Fixture {
        clock: Arc<VirtualClock>,
        sim: SimBackend,
        a0: RailId,
        b0: RailId,
        src: SegmentHandle,
        dst: SegmentHandle,
        dst_mem: MemoryRegion,
    }

    fn fixture(window: u32, faults: Vec<(usize, Fault)>) -> Fixture {
        let rail = |id: &str, node: &str| RailSpec {
            id: id.into(),
            node: node.into(),
            bandwidth_bytes_per_sec: 1_000_000_000,
            affinity: Affinity::Direct,
            network: "default".into(),
            sim: SimLinkParams {
                latency_us: 10.0,
                ..SimLinkParams::default()
            },
        };
        let node = |id: &str| NodeSpec {
            id: id.into(),
            local_bandwidth_bytes_per_sec: 1,
            storage_bandwidth_bytes_per_sec: 1,
        };
        let graph = Arc::new(
            TopologyGraph::from_spec(&TopologySpec {
                nodes: vec![node("a"), node("b")],
                rails: vec![rail("a0", "a"), rail("b0", "b")],
                devices: vec![],
            })
            .unwrap(),
        );
        let a0 = graph.rail_by_name("a0").unwrap();
        let b0 = graph.rail_by_name("b0").unwrap();
        let store = Arc::new(SegmentStore::new());
        let seg = |id: &str, node: u32, mem: &MemoryRegion| {
            store
                .register(
                    &graph,
                    &SegmentDesc {
                        id: id.into(),
                        node: railspray_core::topology::NodeId(node),
                        device: None,
                        medium: Medium::Host,
                        buffers: vec![BufferDesc {
                            offset: 0,
                            len: mem.len() as u64,
                        }],
                    },
                    Backing::Memory(mem.clone()),
                    |_, _| {},
                )
                .unwrap()
        };
        let src_mem = MemoryRegion::from_vec((0..4096u32).map(|i| i as u8).collect());
        let dst_mem = MemoryRegion::zeroed(4096);
        let src = seg("src", 0, &src_mem);
        let dst = seg("dst", 1, &dst_mem);
        let clock = Arc::new(VirtualClock::new());
        let rails = graph.rails().len();
        let faults = FaultSchedule::from_faults(rails, faults.into_iter().map(|(r, f)| (RailId(r as u32), f)).collect())
            .unwrap();
        let sim = SimBackend::new(
            BackendId(0),
            SimOptions {
                name: "sim".into(),
                rail_kind: RailKind::Nic,
                media: super::super::memory_media(),
                intra_node: None,
                window,
                seed: 1,
            },
            BackendContext {
                graph,
                segments: store,
                clock: clock.clone(),
            },
            faults,
        );
        Fixture {
            clock,
            sim,
            a0,
            b0,
            src,
            dst,
            dst_mem,
        }
    }

    fn req(f: &Fixture, slice: u64, off: u64, len: u64) -> SliceWorkRequest {
        SliceWorkRequest {
            work: WorkId::new(SliceId(slice), 0),
            batch: BatchId(1),
            backend: BackendId(0),
            pair: RailPair {
                local: f.a0,
                remote: f.b0,
            },
            direction: Direction::Write,
            src: f.src,
            src_offset: off,
            dst: f.dst,
            dst_offset: off,
            len,
        }
    }

    #[test]
    fn fifo_timing_and_data_movement() {
        let f = fixture(64, vec![]);
        // 1000 bytes at 1 GB/s = 1 us each, plus 10 us latency.
        let reqs = [req(&f, 0, 0, 1000), req(&f, 1, 1000, 1000)];
        assert_eq!(f.sim.post_slices(&reqs).unwrap(), 2);
        assert_eq!(f.sim.next_event_ns(), Some(11_000));
        let mut out = Vec::new();
        f.clock.set(10_999).unwrap();
        assert_eq!(f.sim.poll(f.a0, 8, &mut out), 0);
        f.clock.set(12_000).unwrap();
        assert_eq!(f.sim.poll(f.a0, 8, &mut out), 2);
        assert_eq!(out[1].completed_at_ns, 12_000);
        assert_eq!(f.dst_mem.to_vec(0, 2000), (0..2000u32).map(|i| i as u8).collect::<Vec<_>>());
    }

    #[test]
    fn window_limits_outstanding_slices() {
        let f = fixture(2, vec![]);
        let reqs: Vec<_> = (0..5).map(|i| req(&f, i, i * 10, 10)).collect();
        assert_eq!(f.sim.post_slices(&reqs).unwrap(), 2);
        f.clock.set(1_000_000).unwrap();
        let mut out = Vec::new();
        f.sim.poll(f.a0, 8, &mut out);
        assert_eq!(f.sim.post_slices(&reqs[2..]).unwrap(), 2);
    }

    #[test]
    fn down_rail_fails_without_copy_and_drop_hides_completion() {
        let down = Fault {
            start_ns: 0,
            end_ns: 1_000_000,
            effect: FaultEffect::Down,
        };
        let f = fixture(64, vec![(5, down)]);
        // Local and storage rails of both nodes come first, so b0 is rail 5.
        assert_eq!(f.b0, RailId(5));
        f.sim.post_slices(&[req(&f, 0, 0, 100)]).unwrap();
        f.clock.set(2_000_000).unwrap();
        let mut out = Vec::new();
        f.sim.poll(f.a0, 8, &mut out);
        assert_eq!(out[0].status, CompletionStatus::Failed);
        assert_eq!(f.dst_mem.to_vec(0, 100), vec![0; 100]);

        let drop = Fault {
            start_ns: 0,
            end_ns: u64::MAX,
            effect: FaultEffect::DropCompletion,
        };
        let f = fixture(64, vec![(5, drop)]);
        f.sim.post_slices(&[req(&f, 0, 0, 100)]).unwrap();
        f.clock.set(2_000_000).unwrap();
        let mut out = Vec::new();
        assert_eq!(f.sim.poll(f.a0, 8, &mut out), 0);
        assert_eq!(f.sim.next_event_ns(), None);
        assert_eq!(f.dst_mem.to_vec(0, 100), (0..100u8).collect::<Vec<_>>());
    }

    #[test]
    fn fatal_latch_rejects_posts_and_fails_outstanding() {
        let f = fixture(64, vec![]);
        f.sim.post_slices(&[req(&f, 0, 0, 100)]).unwrap();
        f.sim.latch_fatal();
        assert!(matches!(f.sim.post_slices(&[req(&f, 1, 0, 100)]), Err(PostError::Fatal(_))));
        f.clock.set(1_000_000).unwrap();
        let mut out = Vec::new();
        f.sim.poll(f.a0, 8, &mut out);
        assert_eq!(out[0].status, CompletionStatus::Failed);
    }
}
