//! Slice creation for direct and staged transfers.

use std::sync::Arc;

use railspray_core::capability::BackendId;
use railspray_core::plan::Endpoint;
use railspray_core::reachability::RailPair;
use railspray_core::resilience::SliceAttempts;
use railspray_core::scheduler::decompose;
use railspray_core::segment::SegmentHandle;
use railspray_core::staging::{ChunkState, ChunkWork};
use railspray_core::topology::{RailId, Tier};

use super::state::{Shared, SliceTask, StageRef, StagedRun, TransferState};

impl Shared {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new_task(
        &self,
        tr: &Arc<TransferState>,
        stage: Option<StageRef>,
        src: (SegmentHandle, u64),
        dst: (SegmentHandle, u64),
        len: u64,
        offset: u64,
        direction: railspray_core::capability::Direction,
    ) -> SliceTask {
        SliceTask {
            transfer: tr.clone(),
            slice: self.new_slice_id(),
            stage,
            src: src.0,
            src_offset: src.1,
            dst: dst.0,
            dst_offset: dst.1,
            len,
            offset,
            direction,
            backend: BackendId(0),
            pair: RailPair {
                local: RailId(0),
                remote: RailId(0),
            },
            tier: Tier::One,
            attempts: SliceAttempts::new(),
            posts: 0,
            retrying: false,
            charged: false,
            queued_at_dispatch: 0,
            predicted: 0.0,
            dispatched_at: 0,
        }
    }

    /// Slices of a direct transfer.
    pub(crate) fn direct_tasks(&self, tr: &Arc<TransferState>) -> Vec<SliceTask> {
        let r = tr.req;
        decompose(r.len, &self.cfg.scheduler)
            .into_iter()
            .map(|s| {
                self.new_task(
                    tr,
                    None,
                    (r.src, r.src_offset + s.offset),
                    (r.dst, r.dst_offset + s.offset),
                    s.len,
                    s.offset,
                    r.direction,
                )
            })
            .collect()
    }

    fn endpoint(&self, tr: &TransferState, run: &StagedRun, ep: Endpoint, w: &ChunkWork) -> (SegmentHandle, u64) {
        match ep {
            Endpoint::Source => (tr.req.src, tr.req.src_offset + w.offset),
            Endpoint::Destination => (tr.req.dst, tr.req.dst_offset + w.offset),
            Endpoint::Staging(node) => {
                let pool = self.pools[node.index()].as_ref().expect("staged route through a node without a pool");
                (
                    pool.segment,
                    run.reservations[&node] + w.slot as u64 * self.cfg.staging.chunk_bytes,
                )
            }
        }
    }

    /// Slices for the given chunk stages. Records per-chunk outstanding counts.
    pub(crate) fn stage_tasks(&self, tr: &Arc<TransferState>, run: &mut StagedRun, works: &[ChunkWork]) -> Vec<SliceTask> {
        let mut out = Vec::new();
        for w in works {
            let hop = run.hops[w.stage as usize].clone();
            let src = self.endpoint(tr, run, hop.from, w);
            let dst = self.endpoint(tr, run, hop.to, w);
            let spans = decompose(w.len, &self.cfg.scheduler);
            run.chunk_slices_left[w.chunk as usize] = spans.len() as u32;
            for s in spans {
                out.push(self.new_task(
                    tr,
                    Some(StageRef {
                        chunk: w.chunk,
                        stage: w.stage,
                    }),
                    (src.0, src.1 + s.offset),
                    (dst.0, dst.1 + s.offset),
                    s.len,
                    w.offset + s.offset,
                    hop.direction,
                ));
            }
        }
        out
    }

    /// Reserves staging space on every node the route stages through. Holds
    /// nothing when any pool is short.
    pub(crate) fn reserve_staging(&self, run: &mut StagedRun, len: u64) -> bool {
        let need = self.cfg.staging.reservation_bytes(len);
        let nodes: Vec<_> = run
            .hops
            .iter()
            .filter_map(|h| match h.to {
                Endpoint::Staging(n) => Some(n),
                _ => None,
            })
            .collect();
        for n in nodes {
            if run.reservations.contains_key(&n) {
                continue;
            }
            let pool = self.pools[n.index()].as_ref().expect("staging node without a pool");
            match pool.alloc(need) {
                Some(off) => {
                    run.reservations.insert(n, off);
                }
                None => {
                    self.release_staging(run);
                    return false;
                }
            }
        }
        true
    }

    pub(crate) fn release_staging(&self, run: &mut StagedRun) {
        for (n, off) in std::mem::take(&mut run.reservations) {
            if let Some(p) = &self.pools[n.index()] {
                p.free(off);
            }
        }
    }

    /// First-stage slices of a staged transfer, or `None` while staging
    /// memory is exhausted.
    pub(crate) fn start_staged(&self, tr: &Arc<TransferState>) -> Option<Vec<SliceTask>> {
        let mut run = tr.staged.as_ref().expect("staged transfer").lock();
        if !self.reserve_staging(&mut run, tr.req.len) {
            return None;
        }
        let works = run.pipeline.start();
        Some(self.stage_tasks(tr, &mut run, &works))
    }

    /// Accounts one finished staged slice. Returns follow-up slices and
    /// retires the chunk's unit when it was delivered.
    pub(crate) fn staged_slice_done(&self, tr: &Arc<TransferState>, at: StageRef) -> Vec<SliceTask> {
        let mut run = tr.staged.as_ref().expect("staged transfer").lock();
        let left = &mut run.chunk_slices_left[at.chunk as usize];
        *left -= 1;
        if *left > 0 {
            return Vec::new();
        }
        let works = run.pipeline.stage_done(at.chunk);
        if run.pipeline.chunk_state(at.chunk) == ChunkState::Delivered {
            tr.complete_unit();
        }
        if run.pipeline.is_done() {
            self.release_staging(&mut run);
        }
        self.stage_tasks(tr, &mut run, &works)
    }
}
