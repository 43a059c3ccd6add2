//! File-backed segments on the storage rail, via positional IO.

use std::os::unix::fs::FileExt;
use std::sync::atomic::{AtomicBool, Ordering};

use crossbeam::queue::SegQueue;
use railspray_core::capability::{BackendCapabilities, BackendId, Direction, MediaPair};
use railspray_core::segment::{Medium, Segment};
use railspray_core::slice::{CompletionEvent, CompletionStatus, SliceWorkRequest};
use railspray_core::topology::{RailId, RailKind};

use super::{check_requests, Backend, BackendContext, FatalBackendError, PostError};
use crate::segments::Backing;

pub struct FileBackend {
    caps: BackendCapabilities,
    ctx: BackendContext,
    done: Vec<SegQueue<CompletionEvent>>,
    fatal: AtomicBool,
}

impl std::fmt::Debug for FileBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FileBackend").finish_non_exhaustive()
    }
}

impl FileBackend {
    pub fn new(id: BackendId, ctx: BackendContext) -> Self {
        let media = [Medium::Host, Medium::Device]
            .iter()
            .flat_map(|m| [MediaPair::new(*m, Medium::File), MediaPair::new(Medium::File, *m)])
            .collect();
        let caps = BackendCapabilities {
            id,
            name: "file".into(),
            media,
            directions: vec![Direction::Read, Direction::Write],
            rail_kind: RailKind::Storage,
            cross_node: false,
            intra_node: true,
            max_post_bytes: u64::MAX,
            batched_post: true,
        };
        let done = (0..ctx.graph.rails().len()).map(|_| SegQueue::new()).collect();
        FileBackend {
            caps,
            ctx,
            done,
            fatal: AtomicBool::new(false),
        }
    }

    fn execute(&self, r: &SliceWorkRequest, src: &Backing, dst: &Backing) -> std::io::Result<()> {
        let len = r.len as usize;
        match (src, dst) {
            (Backing::Memory(m), Backing::File(f)) => {
                let buf = m.to_vec(r.src_offset as usize, len);
                f.write_all_at(&buf, r.dst_offset)
            }
            (Backing::File(f), Backing::Memory(m)) => {
                let mut buf = vec![0u8; len];
                f.read_exact_at(&mut buf, r.src_offset)?;
                m.write(r.dst_offset as usize, &buf);
                Ok(())
            }
            _ => Err(std::io::Error::other("file backend needs exactly one file side")),
        }
    }
}

impl Backend for FileBackend {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    fn attach_segment(&self, segment: &Segment, _backing: &Backing) -> Option<Vec<u8>> {
        self.caps.serves_medium(segment.medium()).then(Vec::new)
    }

    fn post_slices(&self, reqs: &[SliceWorkRequest]) -> Result<usize, PostError> {
        if self.is_fatal() {
            return Err(FatalBackendError(self.caps.name.clone()).into());
        }
        let snap = self.ctx.segments.snapshot();
        check_requests(&self.caps, &snap, reqs)?;
        for (i, r) in reqs.iter().enumerate() {
            let (Some(src), Some(dst)) = (snap.backing(r.src), snap.backing(r.dst)) else {
                return Err(PostError::CapabilityMismatch(i));
            };
            let start = self.ctx.clock.now_ns();
            let status = match self.execute(r, src, dst) {
                Ok(()) => CompletionStatus::Ok,
                Err(e) => {
                    log::warn!("file slice failed: {e}");
                    CompletionStatus::Failed
                }
            };
            let end = self.ctx.clock.now_ns();
            self.done[r.pair.local.index()].push(CompletionEvent {
                work: r.work,
                batch: r.batch,
                rail: r.pair.local,
                status,
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
