//! Node-local copies between registered buffers on the intra-node rail.
//! Copies run inside `post_slices`; completions queue up for the next poll.

use std::sync::atomic::{AtomicBool, Ordering};

use crossbeam::queue::SegQueue;
use railspray_core::capability::{BackendCapabilities, BackendId, Direction, MediaPair};
use railspray_core::segment::Segment;
use railspray_core::slice::{CompletionEvent, CompletionStatus, SliceWorkRequest};
use railspray_core::topology::{RailId, RailKind};

use super::{check_requests, Backend, BackendContext, FatalBackendError, PostError};
use crate::memory::MemoryRegion;
use crate::segments::Backing;

pub struct MemcpyBackend {
    caps: BackendCapabilities,
    ctx: BackendContext,
    done: Vec<SegQueue<CompletionEvent>>,
    fatal: AtomicBool,
}

impl std::fmt::Debug for MemcpyBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemcpyBackend").finish_non_exhaustive()
    }
}

impl MemcpyBackend {
    pub fn new(id: BackendId, media: Vec<MediaPair>, ctx: BackendContext) -> Self {
        let caps = BackendCapabilities {
            id,
            name: "memcpy".into(),
            media,
            directions: vec![Direction::Read, Direction::Write],
            rail_kind: RailKind::Intra,
            cross_node: false,
            intra_node: true,
            max_post_bytes: u64::MAX,
            batched_post: true,
        };
        let done = (0..ctx.graph.rails().len()).map(|_| SegQueue::new()).collect();
        MemcpyBackend {
            caps,
            ctx,
            done,
            fatal: AtomicBool::new(false),
        }
    }
}

impl Backend for MemcpyBackend {
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
        for (i, r) in reqs.iter().enumerate() {
            let (Some(src), Some(dst)) = (
                snap.backing(r.src).and_then(|b| b.memory()),
                snap.backing(r.dst).and_then(|b| b.memory()),
            ) else {
                return Err(PostError::CapabilityMismatch(i));
            };
            let start = self.ctx.clock.now_ns();
            MemoryRegion::copy(src, r.src_offset as usize, dst, r.dst_offset as usize, r.len as usize);
            let end = self.ctx.clock.now_ns();
            self.done[r.pair.local.index()].push(CompletionEvent {
                work: r.work,
                batch: r.batch,
                rail: r.pair.local,
                status: CompletionStatus::Ok,
                completed_at_ns: end,
                service_ns: end - start,
                bytes: r.len,
            });
        }
        Ok(reqs.len())
    }

    fn poll(&self, rail: RailId, max: usize, out: &mut Vec<CompletionEvent>) -> usize {
        let Some(q) = self.done.get(rail.index()) else {
            return 0;
        };
        let mut n = 0;
        while n < max {
            let Some(e) = q.pop() else { break };
            out.push(e);
            n += 1;
        }
        n
    }

    fn is_fatal(&self) -> bool {
        self.fatal.load(Ordering::Acquire)
    }

    fn latch_fatal(&self) {
        self.fatal.store(true, Ordering::Release);
    }
}
