//! Logical segments: transport-agnostic data regions made of registered
//! buffers, plus a per-backend opaque metadata blob.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::capability::BackendId;
use crate::topology::{DeviceId, NodeId, TopologyGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Medium {
    Host,
    /// Accelerator memory. Emulated with host allocations on desk-scale setups.
    Device,
    File,
}

/// Engine-wide handle of a registered segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SegmentHandle(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct BufferDesc {
    pub offset: u64,
    pub len: u64,
}

impl BufferDesc {
    pub fn end(&self) -> u64 {
        self.offset + self.len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDesc {
    pub id: String,
    pub node: NodeId,
    /// Attached device; `None` means the node's host memory.
    pub device: Option<DeviceId>,
    pub medium: Medium,
    pub buffers: Vec<BufferDesc>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SegmentError {
    #[error("segment `{0}` is already registered")]
    DuplicateId(String),
    #[error("buffers [{a_start}, {a_end}) and [{b_start}, {b_end}) overlap")]
    OverlappingBuffers {
        a_start: u64,
        a_end: u64,
        b_start: u64,
        b_end: u64,
    },
    #[error("segment declares an empty buffer")]
    EmptyBuffer,
    #[error("segment declares no buffers")]
    NoBuffers,
    #[error("unknown node for segment")]
    UnknownNode,
    #[error("device does not belong to the owning node")]
    DeviceNodeMismatch,
    #[error("unknown segment `{0}`")]
    UnknownSegment(String),
    #[error("range [{offset}, {offset}+{len}) is not inside a single registered buffer")]
    InvalidRange { offset: u64, len: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    handle: SegmentHandle,
    id: String,
    node: NodeId,
    device: DeviceId,
    medium: Medium,
    /// Sorted by offset, non-overlapping.
    buffers: Vec<BufferDesc>,
    metadata: BTreeMap<BackendId, Vec<u8>>,
}

impl Segment {
    /// Validates `desc` against `graph`. Buffers are sorted by offset.
    pub fn new(
        graph: &TopologyGraph,
        handle: SegmentHandle,
        desc: &SegmentDesc,
    ) -> Result<Segment, SegmentError> {
        if desc.node.index() >= graph.nodes().len() {
            return Err(SegmentError::UnknownNode);
        }
        let device = match desc.device {
            Some(d) => {
                if d.0 as usize >= graph.devices().len() || graph.device(d).node != desc.node {
                    return Err(SegmentError::DeviceNodeMismatch);
                }
                d
            }
            None => graph.node(desc.node).host_device,
        };
        if desc.buffers.is_empty() {
            return Err(SegmentError::NoBuffers);
        }
        let mut buffers = desc.buffers.clone();
        buffers.sort_by_key(|b| (b.offset, b.len));
        if buffers.iter().any(|b| b.len == 0) {
            return Err(SegmentError::EmptyBuffer);
        }
        for w in buffers.windows(2) {
            if w[0].end() > w[1].offset {
                return Err(SegmentError::OverlappingBuffers {
                    a_start: w[0].offset,
                    a_end: w[0].end(),
                    b_start: w[1].offset,
                    b_end: w[1].end(),
                });
            }
        }
        Ok(Segment {
            handle,
            id: desc.id.clone(),
            node: desc.node,
            device,
            medium: desc.medium,
            buffers,
            metadata: BTreeMap::new(),
        })
    }

    pub fn handle(&self) -> SegmentHandle {
        self.handle
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn device(&self) -> DeviceId {
        self.device
    }

    pub fn medium(&self) -> Medium {
        self.medium
    }

    pub fn buffers(&self) -> &[BufferDesc] {
        &self.buffers
    }

    /// Index of the one buffer that fully contains `[offset, offset + len)`.
    pub fn locate(&self, offset: u64, len: u64) -> Result<usize, SegmentError> {
        let invalid = SegmentError::InvalidRange { offset, len };
        let end = offset.checked_add(len).ok_or(invalid.clone())?;
        if len == 0 {
            return Err(invalid);
        }
        let idx = self.buffers.partition_point(|b| b.offset <= offset);
        if idx == 0 {
            return Err(invalid);
        }
        let b = &self.buffers[idx - 1];
        if end <= b.end() {
            Ok(idx - 1)
        } else {
            Err(invalid)
        }
    }

    pub fn attach_metadata(&mut self, backend: BackendId, blob: Vec<u8>) {
        self.metadata.insert(backend, blob);
    }

    /// The blob `backend` attached at registration, if any. Blobs are only
    /// meaningful to the backend that produced them.
    pub fn metadata_for(&self, backend: BackendId) -> Option<&[u8]> {
        self.metadata.get(&backend).map(|v| v.as_slice())
    }

    pub fn metadata_backends(&self) -> impl Iterator<Item = BackendId> + '_ {
        self.metadata.keys().copied()
    }
}

/// Plain registry of segments; the engine wraps it in a published snapshot.
#[derive(Debug, Clone, Default)]
pub struct SegmentTable {
    segments: Vec<Segment>,
    by_id: BTreeMap<String, SegmentHandle>,
}

impl SegmentTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_handle(&self) -> SegmentHandle {
        SegmentHandle(self.segments.len() as u32)
    }

    pub fn insert(&mut self, segment: Segment) -> Result<SegmentHandle, SegmentError> {
        if self.by_id.contains_key(segment.id()) {
            return Err(SegmentError::DuplicateId(segment.id.clone()));
        }
        let handle = segment.handle;
        debug_assert_eq!(handle, self.next_handle());
        self.by_id.insert(segment.id.clone(), handle);
        self.segments.push(segment);
        Ok(handle)
    }

    pub fn get(&self, handle: SegmentHandle) -> Option<&Segment> {
        self.segments.get(handle.0 as usize)
    }

    pub fn lookup(&self, id: &str) -> Result<&Segment, SegmentError> {
        self.by_id
            .get(id)
            .and_then(|h| self.get(*h))
            .ok_or_else(|| SegmentError::UnknownSegment(id.into()))
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter()
    }
}
