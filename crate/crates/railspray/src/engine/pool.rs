//! Per-node host staging memory, carved up first-fit among staged transfers.

use std::collections::BTreeMap;

use parking_lot::Mutex;
use railspray_core::segment::SegmentHandle;

#[derive(Debug)]
pub(crate) struct StagingPool {
    pub segment: SegmentHandle,
    size: u64,
    /// Allocated ranges, offset to length.
    used: Mutex<BTreeMap<u64, u64>>,
}

impl StagingPool {
    pub fn new(segment: SegmentHandle, size: u64) -> Self {
        StagingPool {
            segment,
            size,
            used: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn alloc(&self, len: u64) -> Option<u64> {
        if len == 0 || len > self.size {
            return None;
        }
        let mut used = self.used.lock();
        let mut cursor = 0;
        for (&off, &l) in used.iter() {
            if off - cursor >= len {
                break;
            }
            cursor = off + l;
        }
        if self.size - cursor < len {
            return None;
        }
        used.insert(cursor, len);
        Some(cursor)
    }

    pub fn free(&self, offset: u64) {
        self.used.lock().remove(&offset);
    }

    pub fn in_use(&self) -> u64 {
        self.used.lock().values().sum()
    }
}
