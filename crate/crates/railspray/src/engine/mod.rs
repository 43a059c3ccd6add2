//! The transfer engine: segment registration, batch submission, worker
//! runtime and the virtual-time driver.

mod dispatch;
mod pool;
mod staged;
mod state;
mod worker;

use std::collections::{BTreeMap, VecDeque};
use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam::queue::SegQueue;
use parking_lot::{Mutex, RwLock};
use railspray_core::batch::{BatchError, BatchState, BatchStatus, FailureReason};
use railspray_core::plan::{build_plan, PlanError, Route};
use railspray_core::resilience::{HealthState, RailHealth};
use railspray_core::scheduler::{slice_count, GlobalLoadBoard, RailCostState};
use railspray_core::segment::{BufferDesc, Medium, SegmentDesc, SegmentError, SegmentHandle};
use railspray_core::slice::BatchId;
use railspray_core::staging::StagedPipeline;
use railspray_core::topology::{RailId, TopologyGraph};

use self::dispatch::Dispatch;
use self::pool::StagingPool;
use self::state::{BatchEntry, LoadBoardLink, SchedState, Shared, SliceTask, StagedRun, TransferState};
pub use self::state::{TransferId, TransferRequest, TransferStatus};
use self::worker::Worker;
use crate::backend::{build_backends, Backend, BackendContext, BackendStartError};
use crate::clock::{Clock, VirtualClock, WallClock};
use crate::config::{ClockMode, ConfigLoadError, EngineConfig};
use crate::faults::FaultSchedule;
use crate::memory::MemoryRegion;
use crate::ring::SubmissionRing;
use crate::segments::{Backing, SegmentStore};
use crate::telemetry::Telemetry;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigLoadError),
    #[error(transparent)]
    Backend(#[from] BackendStartError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error("unknown batch {0:?}")]
    UnknownBatch(BatchId),
    #[error("unknown transfer {0:?}")]
    UnknownTransfer(TransferId),
    #[error("unknown segment {0:?}")]
    UnknownSegment(SegmentHandle),
    #[error("unknown node or device `{0}`")]
    UnknownName(String),
    #[error("transfer length must be positive")]
    EmptyTransfer,
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("batch {0:?} still has work in flight")]
    BatchBusy(BatchId),
    #[error("engine is shutting down")]
    ShuttingDown,
}

pub type Result<T> = std::result::Result<T, EngineError>;

const STAGING_PREFIX: &str = "__staging/";
const PROBE_PREFIX: &str = "__probe/";

#[derive(Debug)]
pub struct Engine {
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl Engine {
    pub fn new(cfg: EngineConfig, graph: TopologyGraph, faults: FaultSchedule) -> Result<Self> {
        cfg.validate()?;
        let graph = Arc::new(graph);
        let (clock, vclock): (Arc<dyn Clock>, Option<Arc<VirtualClock>>) = match cfg.clock {
            ClockMode::Virtual => {
                let v = Arc::new(VirtualClock::new());
                (v.clone(), Some(v))
            }
            ClockMode::Real => (Arc::new(WallClock::new()), None),
        };
        let segments = Arc::new(SegmentStore::new());
        let ctx = BackendContext {
            graph: graph.clone(),
            segments: segments.clone(),
            clock: clock.clone(),
        };
        let backends = build_backends(&cfg.backends, &ctx, &faults)?;
        let caps = backends.iter().map(|b| b.capabilities().clone()).collect();

        let nrails = graph.rails().len();
        let nworkers = match cfg.workers {
            0 => nrails.max(1),
            n => n.min(nrails.max(1)),
        };
        let owner: Vec<usize> = (0..nrails).map(|r| r % nworkers).collect();
        let workers = (0..nworkers)
            .map(|w| {
                let rails = (0..nrails).filter(|r| owner[*r] == w).map(|r| RailId(r as u32)).collect();
                Mutex::new(Worker::new(w, rails, nrails))
            })
            .collect();

        let sched = SchedState {
            cost: graph
                .rails()
                .iter()
                .map(|r| RailCostState::new(r.id, r.bandwidth, r.tier, &cfg.scheduler))
                .collect(),
            health: vec![RailHealth::new(); nrails],
            epoch: 0,
            cursor: 0,
            next_reset_ns: cfg.scheduler.reset_interval_ns(),
            next_publish_ns: 0,
        };
        let telemetry = Telemetry::new(&graph, cfg.telemetry_window_ms * 1_000_000);
        telemetry.set_enabled(cfg.stats);

        let attempt_timeout_ns = cfg.retry.attempt_timeout_ms(vclock.is_some()) * 1_000_000;
        let mut shared = Shared {
            attempt_timeout_ns,
            rings: (0..nworkers).map(|_| SubmissionRing::new(cfg.ring_capacity)).collect(),
            handoff: (0..nworkers).map(|_| SegQueue::new()).collect(),
            cfg,
            graph: graph.clone(),
            segments,
            clock,
            vclock,
            backends,
            caps,
            sched: Mutex::new(sched),
            batches: RwLock::new(BTreeMap::new()),
            next_batch: AtomicU64::new(1),
            next_transfer: AtomicU64::new(1),
            next_slice: AtomicU64::new(1),
            workers,
            owner,
            telemetry,
            pools: Vec::new(),
            parked_inbox: SegQueue::new(),
            staging_waiters: Mutex::new(VecDeque::new()),
            probe_segments: Vec::new(),
            shutting_down: AtomicBool::new(false),
            board: Mutex::new(None),
        };
        for node in graph.nodes() {
            let pool_len = shared.cfg.staging.pool_bytes;
            let staging = register(
                &shared,
                SegmentDesc {
                    id: format!("{STAGING_PREFIX}{}", node.name),
                    node: node.id,
                    device: None,
                    medium: Medium::Host,
                    buffers: vec![BufferDesc { offset: 0, len: pool_len }],
                },
                Backing::Memory(MemoryRegion::zeroed(pool_len as usize)),
            )?;
            shared.pools.push(Some(StagingPool::new(staging, pool_len)));
            let probe_len = shared.cfg.health.probe_bytes;
            let probe = register(
                &shared,
                SegmentDesc {
                    id: format!("{PROBE_PREFIX}{}", node.name),
                    node: node.id,
                    device: None,
                    medium: Medium::Host,
                    buffers: vec![BufferDesc { offset: 0, len: probe_len }],
                },
                Backing::Memory(MemoryRegion::zeroed(probe_len as usize)),
            )?;
            shared.probe_segments.push(probe);
        }

        let shared = Arc::new(shared);
        let mut threads = Vec::new();
        if shared.vclock.is_none() {
            for w in 0..nworkers {
                let sh = shared.clone();
                let handle = std::thread::Builder::new()
                    .name(format!("railspray-worker-{w}"))
                    .spawn(move || run_worker(&sh, w))
                    .map_err(|e| BackendStartError::Io("worker".into(), e))?;
                threads.push(handle);
            }
        }
        Ok(Engine { shared, threads })
    }

    /// Loads an engine config file together with the topology and fault
    /// schedule it names.
    pub fn from_config_file(path: &Path) -> Result<Self> {
        let (cfg, graph, faults) = EngineConfig::load(path)?;
        Self::new(cfg, graph, faults)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.shared.cfg
    }

    pub fn graph(&self) -> &TopologyGraph {
        &self.shared.graph
    }

    pub fn segments(&self) -> &SegmentStore {
        &self.shared.segments
    }

    pub fn telemetry(&self) -> &Telemetry {
        &self.shared.telemetry
    }

    pub fn backends(&self) -> &[Arc<dyn Backend>] {
        &self.shared.backends
    }

    pub fn worker_count(&self) -> usize {
        self.shared.workers.len()
    }

    pub fn is_virtual(&self) -> bool {
        self.shared.vclock.is_some()
    }

    pub fn now_ns(&self) -> u64 {
        self.shared.now()
    }

    pub fn register_segment(&self, desc: SegmentDesc, backing: Backing) -> Result<SegmentHandle> {
        if desc.id.starts_with(STAGING_PREFIX) || desc.id.starts_with(PROBE_PREFIX) {
            return Err(SegmentError::DuplicateId(desc.id).into());
        }
        register(&self.shared, desc, backing)
    }

    /// Registers `region` as one buffer on `node`, in host memory or on the
    /// named device.
    pub fn register_memory(&self, id: &str, node: &str, device: Option<&str>, region: MemoryRegion) -> Result<SegmentHandle> {
        let g = &self.shared.graph;
        let node_id = g.node_by_name(node).ok_or_else(|| EngineError::UnknownName(node.into()))?;
        let (device, medium) = match device {
            Some(d) => {
                let id = g.device_by_name(d).ok_or_else(|| EngineError::UnknownName(d.into()))?;
                (Some(id), g.device(id).medium)
            }
            None => (None, Medium::Host),
        };
        let len = region.len() as u64;
        self.register_segment(
            SegmentDesc {
                id: id.into(),
                node: node_id,
                device,
                medium,
                buffers: vec![BufferDesc { offset: 0, len }],
            },
            Backing::Memory(region),
        )
    }

    pub fn allocate_batch(&self) -> BatchId {
        let id = BatchId(self.shared.next_batch.fetch_add(1, Ordering::Relaxed));
        self.shared.batches.write().insert(id, Arc::new(BatchEntry::new(id)));
        id
    }

    fn batch(&self, id: BatchId) -> Result<Arc<BatchEntry>> {
        self.shared.batches.read().get(&id).cloned().ok_or(EngineError::UnknownBatch(id))
    }

    pub fn submit_transfer(&self, batch: BatchId, req: TransferRequest) -> Result<TransferId> {
        Ok(self.submit_transfers(batch, &[req])?[0])
    }

    /// Plans every request, then registers all their work units with the
    /// batch before any slice is dispatched. Nothing is submitted when a
    /// request fails validation. Returns without waiting for any transfer.
    pub fn submit_transfers(&self, batch: BatchId, reqs: &[TransferRequest]) -> Result<Vec<TransferId>> {
        let sh = &*self.shared;
        if sh.shutting_down.load(Ordering::Acquire) {
            return Err(EngineError::ShuttingDown);
        }
        let entry = self.batch(batch)?;
        let snap = sh.segments.snapshot();
        let usable: Vec<_> = sh
            .backends
            .iter()
            .zip(&sh.caps)
            .filter(|(b, _)| !b.is_fatal())
            .map(|(_, c)| c.clone())
            .collect();
        let mut transfers = Vec::with_capacity(reqs.len());
        for r in reqs {
            if r.len == 0 {
                return Err(EngineError::EmptyTransfer);
            }
            let src = snap.segment(r.src).ok_or(EngineError::UnknownSegment(r.src))?;
            let dst = snap.segment(r.dst).ok_or(EngineError::UnknownSegment(r.dst))?;
            src.locate(r.src_offset, r.len)?;
            dst.locate(r.dst_offset, r.len)?;
            let plan = build_plan(&sh.graph, &usable, src, dst, r.direction, |n| {
                sh.pools
                    .get(n.index())
                    .and_then(|p| p.as_ref())
                    .and_then(|p| snap.segment(p.segment))
            })?
            .direct_only();
            let (total_units, staged) = match plan.active() {
                Route::Direct(_) => (slice_count(r.len, &sh.cfg.scheduler), None),
                Route::Staged(hops) => {
                    let pipeline =
                        StagedPipeline::new(r.len, hops.iter().map(|h| h.kind).collect(), &sh.cfg.staging);
                    let chunks = pipeline.chunk_count();
                    (
                        chunks as u64,
                        Some(Mutex::new(StagedRun {
                            pipeline,
                            hops: hops.clone(),
                            reservations: BTreeMap::new(),
                            chunk_slices_left: vec![0; chunks as usize],
                        })),
                    )
                }
            };
            transfers.push(Arc::new(TransferState {
                id: TransferId(sh.next_transfer.fetch_add(1, Ordering::Relaxed)),
                batch: entry.clone(),
                req: *r,
                plan: Mutex::new(plan),
                total_units,
                remaining: AtomicU64::new(total_units),
                staged,
            }));
        }
        entry.cb.add_units(transfers.iter().map(|t| t.total_units).sum())?;
        entry.transfers.lock().extend(transfers.iter().cloned());

        let mut ready: Vec<SliceTask> = Vec::new();
        for tr in &transfers {
            if tr.staged.is_none() {
                ready.extend(sh.direct_tasks(tr));
            } else if let Some(tasks) = sh.start_staged(tr) {
                ready.extend(tasks);
            } else {
                sh.staging_waiters.lock().push_back(tr.clone());
            }
        }
        let mut assigned = Vec::with_capacity(ready.len());
        {
            let mut st = sh.sched.lock();
            let now = sh.now();
            for mut t in ready {
                match sh.dispatch(&mut st, &mut t, now) {
                    Dispatch::Assigned => assigned.push(t),
                    Dispatch::Park => sh.parked_inbox.push(t),
                    Dispatch::Fail(reason) => {
                        entry.fail(reason);
                        sh.release(&mut st, &mut t);
                    }
                }
            }
        }
        for t in assigned {
            sh.enqueue(t);
        }
        Ok(transfers.iter().map(|t| t.id).collect())
    }

    pub fn batch_status(&self, batch: BatchId) -> Result<BatchStatus> {
        Ok(self.batch(batch)?.cb.status())
    }

    pub fn transfer_status(&self, batch: BatchId, transfer: TransferId) -> Result<TransferStatus> {
        let entry = self.batch(batch)?;
        let transfers = entry.transfers.lock();
        let t = transfers
            .iter()
            .find(|t| t.id == transfer)
            .ok_or(EngineError::UnknownTransfer(transfer))?;
        let remaining = t.remaining.load(Ordering::Acquire);
        let state = match entry.cb.failure() {
            Some(r) => BatchState::Failed(r),
            None if remaining == 0 => BatchState::Complete,
            None => BatchState::InFlight,
        };
        Ok(TransferStatus {
            state,
            total_units: t.total_units,
            remaining_units: remaining,
            staged: t.staged.is_some(),
        })
    }

    /// Waits until the batch completes or fails, or `timeout` passes. Under
    /// the virtual clock the timeout is virtual time and this call drives the
    /// engine.
    pub fn wait(&self, batch: BatchId, timeout: Duration) -> Result<BatchStatus> {
        let entry = self.batch(batch)?;
        if self.is_virtual() {
            let deadline = self.now_ns().saturating_add(timeout.as_nanos() as u64);
            self.run_until(deadline, || entry.cb.status().state != BatchState::InFlight);
        } else {
            entry.wait_real(timeout);
        }
        Ok(entry.cb.status())
    }

    /// Forgets a finished batch. Fails while it still counts outstanding work.
    pub fn free_batch(&self, batch: BatchId) -> Result<()> {
        let entry = self.batch(batch)?;
        if entry.cb.status().state == BatchState::InFlight {
            return Err(EngineError::BatchBusy(batch));
        }
        self.shared.batches.write().remove(&batch);
        Ok(())
    }

    /// Fault injection: latches the named backend into its fatal state.
    pub fn latch_backend_fatal(&self, name: &str) -> bool {
        match self.shared.backends.iter().find(|b| b.name() == name) {
            Some(b) => {
                b.latch_fatal();
                // parked slices may now have a substitute route
                self.shared.sched.lock().epoch += 1;
                true
            }
            None => false,
        }
    }

    /// Staging bytes currently reserved, summed over nodes.
    pub fn staging_in_use(&self) -> u64 {
        self.shared.pools.iter().flatten().map(|p| p.in_use()).sum()
    }

    /// Slices held by workers: queued, posted or parked.
    pub fn slices_outstanding(&self) -> usize {
        self.shared.workers.iter().map(|w| w.lock().outstanding()).sum()
    }

    pub fn rail_health(&self, rail: RailId) -> HealthState {
        self.shared.sched.lock().health[rail.index()].state()
    }

    /// Bytes currently charged to each rail's queue.
    pub fn queued_bytes(&self) -> Vec<u64> {
        self.shared.sched.lock().cost.iter().map(|c| c.queued_bytes).collect()
    }

    /// Joins a cross-engine load board; the engine publishes its queue
    /// depths as `publisher` and reads the global estimate back.
    pub fn with_load_board(&self, board: Arc<Mutex<GlobalLoadBoard>>, publisher: u64) {
        *self.shared.board.lock() = Some(LoadBoardLink { board, publisher });
    }

    /// Steps every worker until none makes progress. Returns the earliest
    /// time any worker asked to be woken at.
    pub fn pump(&self) -> Option<u64> {
        loop {
            let mut progress = false;
            let mut wake = None;
            for w in &self.shared.workers {
                let r = w.lock().step(&self.shared);
                progress |= r.progress;
                wake = min_opt(wake, r.wakeup);
            }
            if !progress {
                return wake;
            }
        }
    }

    fn next_event(&self, wake: Option<u64>) -> Option<u64> {
        self.shared
            .backends
            .iter()
            .fold(wake, |acc, b| min_opt(acc, b.next_event_ns()))
    }

    /// Virtual clock only: runs the engine to quiescence, then moves time to
    /// the next scheduled event. Returns false when nothing is scheduled.
    pub fn advance(&self) -> bool {
        let wake = self.pump();
        self.advance_after(wake)
    }

    /// Like [`advance`](Self::advance) for a caller that just pumped and got
    /// `wake` back.
    pub fn advance_after(&self, wake: Option<u64>) -> bool {
        let Some(v) = &self.shared.vclock else {
            return false;
        };
        match self.next_event(wake) {
            Some(t) => {
                let _ = v.set(t.max(v.now_ns() + 1));
                true
            }
            None => false,
        }
    }

    /// Drives the engine until `done` holds or time reaches `deadline_ns`.
    /// Under the real clock this polls `done` while the workers run.
    pub fn run_until(&self, deadline_ns: u64, mut done: impl FnMut() -> bool) -> bool {
        let Some(v) = &self.shared.vclock else {
            while !done() {
                if self.now_ns() >= deadline_ns {
                    return false;
                }
                std::thread::sleep(Duration::from_micros(100));
            }
            return true;
        };
        loop {
            let wake = self.pump();
            if done() {
                return true;
            }
            let now = v.now_ns();
            if now >= deadline_ns {
                return false;
            }
            let t = self.next_event(wake).map_or(deadline_ns, |t| t.max(now + 1).min(deadline_ns));
            let _ = v.set(t);
        }
    }

    /// Virtual clock only: runs until time reaches `t_ns`.
    pub fn run_to(&self, t_ns: u64) {
        self.run_until(t_ns, || false);
    }

    /// Stops the workers and fails every batch still in flight.
    pub fn shutdown(&mut self) {
        let sh = &self.shared;
        if sh.shutting_down.swap(true, Ordering::AcqRel) {
            return;
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        for b in sh.batches.read().values() {
            if b.cb.status().state == BatchState::InFlight {
                b.fail(FailureReason::Shutdown);
            }
        }
        for b in &sh.backends {
            b.shutdown();
        }
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn min_opt(a: Option<u64>, b: Option<u64>) -> Option<u64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

fn register(sh: &Shared, desc: SegmentDesc, backing: Backing) -> Result<SegmentHandle> {
    let backends = &sh.backends;
    Ok(sh.segments.register(&sh.graph, &desc, backing, |seg, backing| {
        for b in backends {
            if let Some(blob) = b.attach_segment(seg, backing) {
                seg.attach_metadata(b.id(), blob);
            }
        }
    })?)
}

fn run_worker(sh: &Shared, index: usize) {
    while !sh.shutting_down.load(Ordering::Acquire) {
        let mut w = sh.workers[index].lock();
        let r = std::panic::catch_unwind(AssertUnwindSafe(|| w.step(sh)));
        match r {
            Ok(r) if r.progress => {}
            Ok(r) => {
                drop(w);
                let now = sh.now();
                let idle = r.wakeup.map_or(100_000, |t| t.saturating_sub(now).min(100_000));
                if idle > 0 {
                    std::thread::sleep(Duration::from_nanos(idle));
                }
            }
            Err(_) => {
                log::error!("worker {index} panicked; failing its batches");
                for b in w.abandon() {
                    b.fail(FailureReason::WorkerPanic);
                }
            }
        }
    }
}
