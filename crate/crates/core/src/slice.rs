//! Work units handed to backends and the completions they return.

use crate::capability::{BackendId, Direction};
use crate::reachability::RailPair;
use crate::segment::SegmentHandle;
use crate::topology::RailId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BatchId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SliceId(pub u64);

/// Identifies one attempt of one slice on the wire and in completion queues.
/// The low byte is the attempt number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WorkId(pub u64);

impl WorkId {
    pub fn new(slice: SliceId, attempt: u8) -> Self {
        WorkId(slice.0 << 8 | attempt as u64)
    }

    pub fn slice(self) -> SliceId {
        SliceId(self.0 >> 8)
    }

    pub fn attempt(self) -> u8 {
        self.0 as u8
    }
}

/// One backend post: move `len` bytes from `src` to `dst` over `pair`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceWorkRequest {
    pub work: WorkId,
    pub batch: BatchId,
    pub backend: BackendId,
    pub pair: RailPair,
    pub direction: Direction,
    pub src: SegmentHandle,
    pub src_offset: u64,
    pub dst: SegmentHandle,
    pub dst_offset: u64,
    pub len: u64,
}

impl SliceWorkRequest {
    /// The rail whose completion queue reports this request.
    pub fn rail(&self) -> RailId {
        self.pair.local
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompletionStatus {
    Ok,
    Failed,
    Timeout,
}

impl CompletionStatus {
    pub fn code(self) -> u8 {
        match self {
            CompletionStatus::Ok => 0,
            CompletionStatus::Failed => 1,
            CompletionStatus::Timeout => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(CompletionStatus::Ok),
            1 => Some(CompletionStatus::Failed),
            2 => Some(CompletionStatus::Timeout),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompletionEvent {
    pub work: WorkId,
    pub batch: BatchId,
    pub rail: RailId,
    pub status: CompletionStatus,
    /// Time the backend reports the completion at, in clock nanoseconds.
    pub completed_at_ns: u64,
    /// Backend service time, post to completion.
    pub service_ns: u64,
    pub bytes: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn work_id_round_trips() {
        let w = WorkId::new(SliceId(0x00ab_cdef_0123_4567), 3);
        assert_eq!(w.slice(), SliceId(0x00ab_cdef_0123_4567));
        assert_eq!(w.attempt(), 3);
        for c in 0..3 {
            assert_eq!(CompletionStatus::from_code(c).unwrap().code(), c);
        }
        assert_eq!(CompletionStatus::from_code(9), None);
    }
}
