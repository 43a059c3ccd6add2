//! Engine-wide shared state: batches, transfers, slice tasks and the
//! scheduler's per-rail view.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use crossbeam::queue::SegQueue;
use parking_lot::{Condvar, Mutex, RwLock};
use railspray_core::batch::{BatchControlBlock, BatchState, FailureReason};
use railspray_core::capability::{BackendCapabilities, BackendId, Direction};
use railspray_core::plan::{Hop, TransferPlan};
use railspray_core::reachability::RailPair;
use railspray_core::resilience::{HealthState, RailHealth, SliceAttempts};
use railspray_core::scheduler::{GlobalLoadBoard, RailCostState};
use railspray_core::segment::SegmentHandle;
use railspray_core::slice::{BatchId, SliceId};
use railspray_core::staging::StagedPipeline;
use railspray_core::topology::{NodeId, RailId, Tier, TopologyGraph};

use super::pool::StagingPool;
use super::worker::Worker;
use crate::backend::Backend;
use crate::clock::{Clock, VirtualClock};
use crate::config::EngineConfig;
use crate::ring::SubmissionRing;
use crate::segments::SegmentStore;
use crate::telemetry::Telemetry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TransferId(pub u64);

/// One logical copy: `len` bytes from `src` at `src_offset` to `dst` at
/// `dst_offset`. `direction` says which side initiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferRequest {
    pub src: SegmentHandle,
    pub src_offset: u64,
    pub dst: SegmentHandle,
    pub dst_offset: u64,
    pub len: u64,
    pub direction: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransferStatus {
    pub state: BatchState,
    pub total_units: u64,
    pub remaining_units: u64,
    /// Whether the transfer runs through staging buffers.
    pub staged: bool,
}

#[derive(Debug)]
pub(crate) struct BatchEntry {
    pub cb: BatchControlBlock,
    pub transfers: Mutex<Vec<Arc<TransferState>>>,
    done: Mutex<bool>,
    cv: Condvar,
}

impl BatchEntry {
    pub fn new(id: BatchId) -> Self {
        BatchEntry {
            cb: BatchControlBlock::new(id),
            transfers: Mutex::new(Vec::new()),
            done: Mutex::new(false),
            cv: Condvar::new(),
        }
    }

    pub fn notify(&self) {
        *self.done.lock() = true;
        self.cv.notify_all();
    }

    /// Blocks until the batch leaves the in-flight state or `timeout` passes.
    pub fn wait_real(&self, timeout: std::time::Duration) {
        let deadline = std::time::Instant::now() + timeout;
        let mut done = self.done.lock();
        while !*done && self.cb.status().state == BatchState::InFlight {
            if self.cv.wait_until(&mut done, deadline).timed_out() {
                break;
            }
        }
    }

    pub fn fail(&self, reason: FailureReason) {
        if self.cb.fail(reason) {
            self.notify();
        }
    }
}

#[derive(Debug)]
pub(crate) struct StagedRun {
    pub pipeline: StagedPipeline,
    pub hops: Vec<Hop>,
    /// Offset of this transfer's reservation inside each node's pool.
    pub reservations: BTreeMap<NodeId, u64>,
    /// Slices still outstanding in the current stage of each chunk.
    pub chunk_slices_left: Vec<u32>,
}

#[derive(Debug)]
pub(crate) struct TransferState {
    pub id: TransferId,
    pub batch: Arc<BatchEntry>,
    pub req: TransferRequest,
    pub plan: Mutex<TransferPlan>,
    pub total_units: u64,
    pub remaining: AtomicU64,
    pub staged: Option<Mutex<StagedRun>>,
}

impl TransferState {
    /// Retires one unit of this transfer and of its batch.
    pub fn complete_unit(&self) {
        self.remaining.fetch_sub(1, Ordering::AcqRel);
        if self.batch.cb.complete_units(1) {
            self.batch.notify();
        }
    }

    pub fn failed(&self) -> bool {
        self.batch.cb.failure().is_some()
    }
}

/// Where a slice sits inside a staged transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct StageRef {
    pub chunk: u32,
    pub stage: u8,
}

/// One slice on its way through the engine.
#[derive(Debug)]
pub(crate) struct SliceTask {
    pub transfer: Arc<TransferState>,
    pub slice: SliceId,
    pub stage: Option<StageRef>,
    pub src: SegmentHandle,
    pub src_offset: u64,
    pub dst: SegmentHandle,
    pub dst_offset: u64,
    pub len: u64,
    /// Offset inside the transfer; feeds the hash policy.
    pub offset: u64,
    pub direction: Direction,
    pub backend: BackendId,
    pub pair: RailPair,
    pub tier: Tier,
    pub attempts: SliceAttempts,
    /// Posts so far; its low byte tags the work id so late completions of
    /// an earlier post are recognised as stale.
    pub posts: u32,
    /// Set after a failure: the next dispatch uses the retry ranking.
    pub retrying: bool,
    /// Whether `len` is currently charged to `pair.local`'s queue.
    pub charged: bool,
    pub queued_at_dispatch: u64,
    pub predicted: f64,
    pub dispatched_at: u64,
}

#[derive(Debug)]
pub(crate) struct SchedState {
    pub cost: Vec<RailCostState>,
    pub health: Vec<RailHealth>,
    /// Bumped on every health transition; parked slices retry when it moves.
    pub epoch: u64,
    pub cursor: u64,
    pub next_reset_ns: u64,
    pub next_publish_ns: u64,
}

impl SchedState {
    pub fn healthy(&self, rail: RailId) -> bool {
        self.health[rail.index()].state() == HealthState::Healthy
    }
}

#[derive(Debug)]
pub(crate) struct LoadBoardLink {
    pub board: Arc<Mutex<GlobalLoadBoard>>,
    pub publisher: u64,
}

pub(crate) struct Shared {
    pub cfg: EngineConfig,
    pub graph: Arc<TopologyGraph>,
    pub segments: Arc<SegmentStore>,
    pub clock: Arc<dyn Clock>,
    pub vclock: Option<Arc<VirtualClock>>,
    pub backends: Vec<Arc<dyn Backend>>,
    pub caps: Vec<BackendCapabilities>,
    pub sched: Mutex<SchedState>,
    pub batches: RwLock<BTreeMap<BatchId, Arc<BatchEntry>>>,
    pub next_batch: AtomicU64,
    pub next_transfer: AtomicU64,
    pub next_slice: AtomicU64,
    pub rings: Vec<SubmissionRing<SliceTask>>,
    pub handoff: Vec<SegQueue<SliceTask>>,
    pub workers: Vec<Mutex<Worker>>,
    /// Worker index owning each rail.
    pub owner: Vec<usize>,
    pub telemetry: Telemetry,
    pub pools: Vec<Option<StagingPool>>,
    /// Slices that found no healthy rail at submission; worker 0 parks them.
    pub parked_inbox: SegQueue<SliceTask>,
    pub staging_waiters: Mutex<std::collections::VecDeque<Arc<TransferState>>>,
    pub probe_segments: Vec<SegmentHandle>,
    pub shutting_down: AtomicBool,
    pub board: Mutex<Option<LoadBoardLink>>,
    /// Per-attempt timeout resolved for the clock in use.
    pub attempt_timeout_ns: u64,
}

impl std::fmt::Debug for Shared {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Shared")
            .field("workers", &self.workers.len())
            .field("backends", &self.backends.len())
            .finish_non_exhaustive()
    }
}

impl Shared {
    pub fn now(&self) -> u64 {
        self.clock.now_ns()
    }

    pub fn new_slice_id(&self) -> SliceId {
        SliceId(self.next_slice.fetch_add(1, Ordering::Relaxed))
    }

    /// Hands a dispatched task to the worker owning its local rail.
    pub fn enqueue(&self, task: SliceTask) {
        let w = self.owner[task.pair.local.index()];
        let ring = &self.rings[w];
        ring.push(task, || {
            if let Some(mut worker) = self.workers[w].try_lock() {
                worker.drain_ring(ring);
            }
        });
    }

    /// Like [`enqueue`](Self::enqueue) but never blocks; used from workers.
    pub fn handoff(&self, task: SliceTask) {
        let w = self.owner[task.pair.local.index()];
        self.handoff[w].push(task);
    }
}
