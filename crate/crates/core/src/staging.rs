//! Chunked multi-hop pipelines through host staging buffers.
//!
//! A staged transfer is cut into fixed-size chunks. Each chunk walks the same
//! stage sequence (for example device-to-host, host-to-host, host-to-device).
//! At most `ring_depth` chunks are in flight; chunk `k` reuses staging slot
//! `k % ring_depth` and may start only after chunk `k - ring_depth` was
//! delivered.

use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::scheduler::MIB;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StageKind {
    DeviceToHost,
    HostToHost,
    HostToDevice,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::DeviceToHost => "d2h",
            StageKind::HostToHost => "h2h",
            StageKind::HostToDevice => "h2d",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct StagingConfig {
    pub chunk_bytes: u64,
    pub ring_depth: u32,
    /// Host staging memory per node.
    pub pool_bytes: u64,
}

impl Default for StagingConfig {
    fn default() -> Self {
        StagingConfig {
            chunk_bytes: 4 * MIB,
            ring_depth: 4,
            pool_bytes: 64 * MIB,
        }
    }
}

impl StagingConfig {
    /// Staging bytes one transfer reserves on each node it stages through.
    pub fn reservation_bytes(&self, transfer_len: u64) -> u64 {
        let chunks = transfer_len.div_ceil(self.chunk_bytes).max(1);
        chunks.min(self.ring_depth as u64) * self.chunk_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkState {
    Pending,
    InStage(u8),
    Delivered,
}

/// One stage of one chunk, ready to be sliced and dispatched.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkWork {
    pub chunk: u32,
    pub stage: u8,
    pub kind: StageKind,
    /// Offset of the chunk inside the transfer.
    pub offset: u64,
    pub len: u64,
    /// Staging slot; the slot's buffer starts at `slot * chunk_bytes` inside
    /// the transfer's reservation.
    pub slot: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StagedPipeline {
    total_len: u64,
    chunk_bytes: u64,
    depth: u32,
    stages: Vec<StageKind>,
    chunks: Vec<ChunkState>,
    next_start: u32,
    delivered: u32,
}

impl StagedPipeline {
    pub fn new(total_len: u64, stages: Vec<StageKind>, cfg: &StagingConfig) -> Self {
        assert!(!stages.is_empty());
        assert!(cfg.chunk_bytes > 0 && cfg.ring_depth > 0);
        let n = total_len.div_ceil(cfg.chunk_bytes).max(1) as usize;
        StagedPipeline {
            total_len,
            chunk_bytes: cfg.chunk_bytes,
            depth: cfg.ring_depth,
            stages,
            chunks: alloc::vec![ChunkState::Pending; n],
            next_start: 0,
            delivered: 0,
        }
    }

    pub fn chunk_count(&self) -> u32 {
        self.chunks.len() as u32
    }

    pub fn stages(&self) -> &[StageKind] {
        &self.stages
    }

    pub fn chunk_state(&self, chunk: u32) -> ChunkState {
        self.chunks[chunk as usize]
    }

    pub fn is_done(&self) -> bool {
        self.delivered as usize == self.chunks.len()
    }

    /// Number of distinct stages that have at least one chunk in them.
    pub fn active_stages(&self) -> usize {
        let mut seen = [false; 256];
        for c in &self.chunks {
            if let ChunkState::InStage(s) = c {
                seen[*s as usize] = true;
            }
        }
        seen.iter().filter(|s| **s).count()
    }

    fn work(&self, chunk: u32, stage: u8) -> ChunkWork {
        let offset = chunk as u64 * self.chunk_bytes;
        ChunkWork {
            chunk,
            stage,
            kind: self.stages[stage as usize],
            offset,
            len: self.chunk_bytes.min(self.total_len.saturating_sub(offset)),
            slot: chunk % self.depth,
        }
    }

    fn admit(&mut self, out: &mut Vec<ChunkWork>) {
        while (self.next_start as usize) < self.chunks.len() {
            let k = self.next_start;
            if k >= self.depth && self.chunks[(k - self.depth) as usize] != ChunkState::Delivered {
                break;
            }
            self.chunks[k as usize] = ChunkState::InStage(0);
            out.push(self.work(k, 0));
            self.next_start += 1;
        }
    }

    /// First-stage work for the initial window of chunks.
    pub fn start(&mut self) -> Vec<ChunkWork> {
        let mut out = Vec::new();
        self.admit(&mut out);
        out
    }

    /// Marks `chunk`'s current stage finished. Returns the follow-up work:
    /// the chunk's next stage, or newly admitted chunks once it is delivered.
    pub fn stage_done(&mut self, chunk: u32) -> Vec<ChunkWork> {
        let mut out = Vec::new();
        let ChunkState::InStage(s) = self.chunks[chunk as usize] else {
            return out;
        };
        if (s as usize) + 1 < self.stages.len() {
            self.chunks[chunk as usize] = ChunkState::InStage(s + 1);
            out.push(self.work(chunk, s + 1));
        } else {
            self.chunks[chunk as usize] = ChunkState::Delivered;
            self.delivered += 1;
            self.admit(&mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::VecDeque;
    use alloc::vec;
    use proptest::prelude::*;

    fn three() -> Vec<StageKind> {
        vec![StageKind::DeviceToHost, StageKind::HostToHost, StageKind::HostToDevice]
    }

    #[test]
    fn sixty_four_mib_uses_sixteen_chunks_and_overlaps_stages() {
        let cfg = StagingConfig::default();
        let mut p = StagedPipeline::new(64 * MIB, three(), &cfg);
        assert_eq!(p.chunk_count(), 16);
        let mut queue: VecDeque<ChunkWork> = p.start().into();
        assert_eq!(queue.len(), 4);
        assert!(queue.iter().all(|w| w.stage == 0));
        let mut max_active = 0;
        let mut order = Vec::new();
        while let Some(w) = queue.pop_front() {
            order.push((w.chunk, w.stage));
            queue.extend(p.stage_done(w.chunk));
            max_active = max_active.max(p.active_stages());
        }
        assert!(p.is_done());
        assert!(max_active >= 2);
        assert_eq!(order.len(), 48);
    }

    #[test]
    fn ring_slots_wrap() {
        let cfg = StagingConfig::default();
        let mut p = StagedPipeline::new(10 * MIB, vec![StageKind::HostToHost], &cfg);
        let w = p.start();
        assert_eq!(w.len(), 3);
        assert_eq!(w[2].len, 2 * MIB);
        assert_eq!(cfg.reservation_bytes(10 * MIB), 12 * MIB);
        assert_eq!(cfg.reservation_bytes(100 * MIB), 16 * MIB);
    }

    proptest! {
        // Under any completion order: at most `depth` chunks in flight, slot
        // reuse only after delivery, every chunk walks every stage in order.
        #[test]
        fn window_and_order_hold(
            len in 1u64..(40 * MIB),
            depth in 1u32..6,
            nstages in 1usize..4,
            picks in proptest::collection::vec(any::<usize>(), 0..400),
        ) {
            let cfg = StagingConfig { chunk_bytes: 4 * MIB, ring_depth: depth, pool_bytes: 64 * MIB };
            let mut p = StagedPipeline::new(len, three()[..nstages].to_vec(), &cfg);
            let mut ready = p.start();
            let mut next_stage = vec![0u8; p.chunk_count() as usize];
            let mut picks = picks.into_iter();
            while !ready.is_empty() {
                let i = picks.next().unwrap_or(0) % ready.len();
                let w = ready.swap_remove(i);
                prop_assert_eq!(w.stage, next_stage[w.chunk as usize]);
                next_stage[w.chunk as usize] += 1;
                if w.chunk >= depth {
                    prop_assert_eq!(p.chunk_state(w.chunk - depth), ChunkState::Delivered);
                }
                let inflight = (0..p.chunk_count())
                    .filter(|c| matches!(p.chunk_state(*c), ChunkState::InStage(_)))
                    .count();
                prop_assert!(inflight <= depth as usize);
                ready.extend(p.stage_done(w.chunk));
            }
            prop_assert!(p.is_done());
            prop_assert!(next_stage.iter().all(|s| *s as usize == nstages));
        }
    }
}
