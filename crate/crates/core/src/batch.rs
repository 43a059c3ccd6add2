//! Lock-free batch completion tracking.
//!
//! A batch counts outstanding work units. Units are added before the work is
//! enqueued and retired exactly once when the work reaches a terminal state,
//! so a reader never sees a batch go from complete back to in-flight while
//! work is outstanding.

use core::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};

use crate::slice::BatchId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureReason {
    /// Every route of some transfer failed terminally.
    RoutesExhausted,
    /// A slice found no healthy rail within the stall limit.
    NoHealthyRail,
    /// A transfer could not be planned or scheduled.
    NoRoute,
    Shutdown,
    /// A worker thread died while holding work of the batch.
    WorkerPanic,
}

impl FailureReason {
    fn code(self) -> u8 {
        match self {
            FailureReason::RoutesExhausted => 1,
            FailureReason::NoHealthyRail => 2,
            FailureReason::NoRoute => 3,
            FailureReason::Shutdown => 4,
            FailureReason::WorkerPanic => 5,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(FailureReason::RoutesExhausted),
            2 => Some(FailureReason::NoHealthyRail),
            3 => Some(FailureReason::NoRoute),
            4 => Some(FailureReason::Shutdown),
            5 => Some(FailureReason::WorkerPanic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchState {
    InFlight,
    Complete,
    Failed(FailureReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchStatus {
    pub state: BatchState,
    pub total_units: u64,
    pub remaining_units: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum BatchError {
    #[error("batch already completed")]
    AlreadyComplete,
    #[error("batch already failed")]
    AlreadyFailed,
}

#[derive(Debug)]
pub struct BatchControlBlock {
    id: BatchId,
    remaining: AtomicU64,
    total: AtomicU64,
    started: AtomicBool,
    failure: AtomicU8,
}

impl BatchControlBlock {
    pub fn new(id: BatchId) -> Self {
        BatchControlBlock {
            id,
            remaining: AtomicU64::new(0),
            total: AtomicU64::new(0),
            started: AtomicBool::new(false),
            failure: AtomicU8::new(0),
        }
    }

    pub fn id(&self) -> BatchId {
        self.id
    }

    /// Registers `units` outstanding units. Fails once the batch has
    /// completed (after having work) or failed.
    pub fn add_units(&self, units: u64) -> Result<(), BatchError> {
        if self.failure.load(Ordering::Acquire) != 0 {
            return Err(BatchError::AlreadyFailed);
        }
        let mut cur = self.remaining.load(Ordering::Acquire);
        loop {
            if cur == 0 && self.started.load(Ordering::Acquire) {
                return Err(BatchError::AlreadyComplete);
            }
            match self.remaining.compare_exchange_weak(
                cur,
                cur + units,
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => break,
                Err(actual) => cur = actual,
            }
        }
        self.total.fetch_add(units, Ordering::AcqRel);
        self.started.store(true, Ordering::Release);
        Ok(())
    }

    /// Retires `units`; returns true for the call that reached zero.
    pub fn complete_units(&self, units: u64) -> bool {
        let prev = self.remaining.fetch_sub(units, Ordering::AcqRel);
        debug_assert!(prev >= units, "batch {:?} retired more units than added", self.id);
        prev == units
    }

    /// Latches the first failure reason. Returns whether this call set it.
    pub fn fail(&self, reason: FailureReason) -> bool {
        self.failure
            .compare_exchange(0, reason.code(), Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
    }

    pub fn failure(&self) -> Option<FailureReason> {
        FailureReason::from_code(self.failure.load(Ordering::Acquire))
    }

    pub fn status(&self) -> BatchStatus {
        let remaining = self.remaining.load(Ordering::Acquire);
        let total = self.total.load(Ordering::Acquire);
        let state = match self.failure() {
            Some(r) => BatchState::Failed(r),
            None if remaining == 0 => BatchState::Complete,
            None => BatchState::InFlight,
        };
        BatchStatus {
            state,
            total_units: total,
            remaining_units: remaining,
        }
    }

    /// True while units are outstanding, failed or not.
    pub fn has_outstanding(&self) -> bool {
        self.remaining.load(Ordering::Acquire) != 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    extern crate std;
    use std::sync::Arc;
    use std::thread;
    use std::vec::Vec;

    #[test]
    fn empty_batch_is_complete() {
        let b = BatchControlBlock::new(BatchId(1));
        assert_eq!(b.status().state, BatchState::Complete);
        b.add_units(2).unwrap();
        assert_eq!(b.status().state, BatchState::InFlight);
        assert!(!b.complete_units(1));
        assert!(b.complete_units(1));
        assert_eq!(b.status().state, BatchState::Complete);
        assert_eq!(b.add_units(1), Err(BatchError::AlreadyComplete));
    }

    #[test]
    fn first_failure_wins() {
        let b = BatchControlBlock::new(BatchId(1));
        b.add_units(1).unwrap();
        assert!(b.fail(FailureReason::NoHealthyRail));
        assert!(!b.fail(FailureReason::Shutdown));
        assert_eq!(b.status().state, BatchState::Failed(FailureReason::NoHealthyRail));
        assert!(b.has_outstanding());
        assert_eq!(b.add_units(1), Err(BatchError::AlreadyFailed));
    }

    #[test]
    fn concurrent_retirement_hits_zero_once() {
        let b = Arc::new(BatchControlBlock::new(BatchId(7)));
        b.add_units(8 * 1000).unwrap();
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let b = b.clone();
                thread::spawn(move || (0..1000).filter(|_| b.complete_units(1)).count())
            })
            .collect();
        let zeros: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
        assert_eq!(zeros, 1);
        let s = b.status();
        assert_eq!(s.state, BatchState::Complete);
        assert_eq!(s.total_units, 8000);
    }

    #[test]
    fn observed_states_are_monotone() {
        let b = Arc::new(BatchControlBlock::new(BatchId(7)));
        b.add_units(5000).unwrap();
        let reader = {
            let b = b.clone();
            thread::spawn(move || {
                let mut seen_complete = false;
                for _ in 0..200_000 {
                    match b.status().state {
                        BatchState::Complete => seen_complete = true,
                        BatchState::InFlight => assert!(!seen_complete),
                        BatchState::Failed(_) => unreachable!(),
                    }
                }
            })
        };
        for _ in 0..5000 {
            b.complete_units(1);
        }
        reader.join().unwrap();
    }
}
