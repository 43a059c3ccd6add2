//! Engine-wide segment registry with published snapshots: registration takes
//! a writer lock and swaps in a new snapshot, lookups clone the current one.

use std::fs::File;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use railspray_core::segment::{Segment, SegmentDesc, SegmentError, SegmentHandle, SegmentTable};
use railspray_core::topology::TopologyGraph;

use crate::memory::MemoryRegion;

/// Where a segment's bytes live.
#[derive(Debug, Clone)]
pub enum Backing {
    Memory(MemoryRegion),
    File(Arc<File>),
}

impl Backing {
    pub fn memory(&self) -> Option<&MemoryRegion> {
        match self {
            Backing::Memory(m) => Some(m),
            Backing::File(_) => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SegmentSnapshot {
    table: SegmentTable,
    backings: Vec<Backing>,
}

impl SegmentSnapshot {
    pub fn segment(&self, h: SegmentHandle) -> Option<&Segment> {
        self.table.get(h)
    }

    pub fn backing(&self, h: SegmentHandle) -> Option<&Backing> {
        self.backings.get(h.0 as usize)
    }

    pub fn lookup(&self, id: &str) -> Result<&Segment, SegmentError> {
        self.table.lookup(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Segment, &Backing)> {
        self.table.iter().zip(self.backings.iter())
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct SegmentStore {
    current: RwLock<Arc<SegmentSnapshot>>,
    writer: Mutex<()>,
}

impl SegmentStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> Arc<SegmentSnapshot> {
        self.current.read().clone()
    }

    /// Validates and publishes a segment. `attach` is called with the new
    /// segment before publication so backends can add metadata blobs.
    pub fn register(
        &self,
        graph: &TopologyGraph,
        desc: &SegmentDesc,
        backing: Backing,
        attach: impl FnOnce(&mut Segment, &Backing),
    ) -> Result<SegmentHandle, SegmentError> {
        let _w = self.writer.lock();
        let cur = self.snapshot();
        let mut next = (*cur).clone();
        let mut seg = Segment::new(graph, next.table.next_handle(), desc)?;
        if next.table.lookup(&desc.id).is_ok() {
            return Err(SegmentError::DuplicateId(desc.id.clone()));
        }
        if let Backing::Memory(m) = &backing {
            if let Some(last) = seg.buffers().last() {
                if last.end() > m.len() as u64 {
                    return Err(SegmentError::InvalidRange {
                        offset: last.offset,
                        len: last.len,
                    });
                }
            }
        }
        attach(&mut seg, &backing);
        let h = next.table.insert(seg)?;
        next.backings.push(backing);
        *self.current.write() = Arc::new(next);
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use railspray_core::segment::{BufferDesc, Medium};
    use railspray_core::topology::{NodeId, NodeSpec, TopologySpec};

    fn graph() -> TopologyGraph {
        TopologyGraph::from_spec(&TopologySpec {
            nodes: vec![NodeSpec {
                id: "a".into(),
                local_bandwidth_bytes_per_sec: 1,
                storage_bandwidth_bytes_per_sec: 1,
            }],
            rails: vec![],
            devices: vec![],
        })
        .unwrap()
    }

    fn desc(id: &str, len: u64) -> SegmentDesc {
        SegmentDesc {
            id: id.into(),
            node: NodeId(0),
            device: None,
            medium: Medium::Host,
            buffers: vec![BufferDesc { offset: 0, len }],
        }
    }

    #[test]
    fn snapshots_are_immutable() {
        let g = graph();
        let s = SegmentStore::new();
        let before = s.snapshot();
        let h = s
            .register(&g, &desc("x", 8), Backing::Memory(MemoryRegion::zeroed(8)), |_, _| {})
            .unwrap();
        assert!(before.segment(h).is_none());
        assert_eq!(s.snapshot().lookup("x").unwrap().handle(), h);
        let dup = s.register(&g, &desc("x", 8), Backing::Memory(MemoryRegion::zeroed(8)), |_, _| {});
        assert_eq!(dup, Err(SegmentError::DuplicateId("x".into())));
    }

    #[test]
    fn buffers_must_fit_the_backing() {
        let g = graph();
        let s = SegmentStore::new();
        let r = s.register(&g, &desc("x", 16), Backing::Memory(MemoryRegion::zeroed(8)), |_, _| {});
        assert!(matches!(r, Err(SegmentError::InvalidRange { .. })));
    }

    #[test]
    fn concurrent_registration_yields_unique_handles() {
        let g = Arc::new(graph());
        let s = Arc::new(SegmentStore::new());
        let hs: Vec<_> = (0..8)
            .map(|t| {
                let (g, s) = (g.clone(), s.clone());
                std::thread::spawn(move || {
                    (0..50)
                        .map(|i| {
                            s.register(
                                &g,
                                &desc(&format!("{t}-{i}"), 1),
                                Backing::Memory(MemoryRegion::virtual_region(1)),
                                |_, _| {},
                            )
                            .unwrap()
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut all: Vec<_> = hs.into_iter().flat_map(|h| h.join().unwrap()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 400);
        assert_eq!(s.snapshot().len(), 400);
    }
}
