//! Transport backends.
//!
//! A backend executes slice work requests on the rails of one kind and
//! reports one completion per accepted request through per-rail completion
//! queues. Rail choice, retries and timeouts live in the engine; a backend
//! only moves bytes.

pub mod file;
pub mod memcpy;
pub mod sim;
pub mod tcp;

use std::sync::Arc;

use railspray_core::capability::{BackendCapabilities, BackendId, MediaPair};
use railspray_core::segment::{Medium, Segment};
use railspray_core::slice::{CompletionEvent, SliceWorkRequest};
use railspray_core::topology::{RailId, TopologyGraph};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::faults::FaultSchedule;
use crate::segments::{Backing, SegmentSnapshot, SegmentStore};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("backend `{0}` is fatally down")]
pub struct FatalBackendError(pub String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PostError {
    #[error(transparent)]
    Fatal(#[from] FatalBackendError),
    /// The engine offered a request outside the declared capabilities.
    #[error("request {0} does not match the backend's capabilities")]
    CapabilityMismatch(usize),
}

/// Shared engine services handed to every backend at construction.
#[derive(Debug, Clone)]
pub struct BackendContext {
    pub graph: Arc<TopologyGraph>,
    pub segments: Arc<SegmentStore>,
    pub clock: Arc<dyn Clock>,
}

pub trait Backend: Send + Sync + std::fmt::Debug {
    fn capabilities(&self) -> &BackendCapabilities;

    fn id(&self) -> BackendId {
        self.capabilities().id
    }

    fn name(&self) -> &str {
        &self.capabilities().name
    }

    /// Offered once per registered segment this backend can serve. The
    /// returned blob is stored with the segment under this backend's id.
    fn attach_segment(&self, segment: &Segment, backing: &Backing) -> Option<Vec<u8>>;

    /// Accepts a prefix of `reqs`. Every accepted request later yields
    /// exactly one completion (unless the fabric loses it); a short count is
    /// backpressure.
    fn post_slices(&self, reqs: &[SliceWorkRequest]) -> Result<usize, PostError>;

    /// Moves up to `max` completions of `rail` into `out`. Never blocks.
    fn poll(&self, rail: RailId, max: usize, out: &mut Vec<CompletionEvent>) -> usize;

    /// Clock time of the next internally scheduled completion, for backends
    /// whose timing is modelled.
    fn next_event_ns(&self) -> Option<u64> {
        None
    }

    fn is_fatal(&self) -> bool;

    /// Fault injection: from now on every post fails fatally.
    fn latch_fatal(&self);

    fn shutdown(&self) {}
}

/// Media pairs among host and device memory.
pub fn memory_media() -> Vec<MediaPair> {
    let m = [Medium::Host, Medium::Device];
    m.iter()
        .flat_map(|a| m.iter().map(move |b| MediaPair::new(*a, *b)))
        .collect()
}

/// Checks every request against `caps`; returns the first offending index.
pub(crate) fn check_requests(
    caps: &BackendCapabilities,
    snap: &SegmentSnapshot,
    reqs: &[SliceWorkRequest],
) -> Result<(), PostError> {
    for (i, r) in reqs.iter().enumerate() {
        let (Some(s), Some(d)) = (snap.segment(r.src), snap.segment(r.dst)) else {
            return Err(PostError::CapabilityMismatch(i));
        };
        let pair = MediaPair::new(s.medium(), d.medium());
        if r.len == 0 || r.backend != caps.id || !caps.covers(pair, r.direction, s.node() == d.node()) {
            return Err(PostError::CapabilityMismatch(i));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Modelled links: per-rail FIFO with an in-flight window.
    Sim {
        #[serde(default)]
        rails: railspray_core::topology::RailKind,
        #[serde(default)]
        media: Option<Vec<MediaPair>>,
        #[serde(default = "default_window")]
        window: u32,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        intra_node: Option<bool>,
        #[serde(default)]
        name: Option<String>,
    },
    /// Loopback TCP, one connection per rail pair.
    Tcp {
        #[serde(default)]
        media: Option<Vec<MediaPair>>,
        #[serde(default = "default_true")]
        intra_node: bool,
    },
    /// Direct copies between registered buffers on one node.
    Memcpy {
        #[serde(default)]
        media: Option<Vec<MediaPair>>,
    },
    /// Positional reads and writes on file-backed segments.
    File,
}

fn default_window() -> u32 {
    64
}

fn default_true() -> bool {
    true
}

#[derive(Debug, thiserror::Error)]
pub enum BackendStartError {
    #[error("backend `{0}` failed to start: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("invalid backend setting: {0}")]
    Invalid(String),
}

/// Instantiates `configs` in order; list position is the backend id.
pub fn build_backends(
    configs: &[BackendConfig],
    ctx: &BackendContext,
    faults: &FaultSchedule,
) -> Result<Vec<Arc<dyn Backend>>, BackendStartError> {
    let mut out: Vec<Arc<dyn Backend>> = Vec::new();
    for (i, c) in configs.iter().enumerate() {
        let id = BackendId(i as u16);
        let b: Arc<dyn Backend> = match c {
            BackendConfig::Sim {
                rails,
                media,
                window,
                seed,
                intra_node,
                name,
            } => {
                if *window == 0 {
                    return Err(BackendStartError::Invalid("sim window must be positive".into()));
                }
                Arc::new(sim::SimBackend::new(
                    id,
                    sim::SimOptions {
                        name: name.clone().unwrap_or_else(|| format!("sim-{}", i)),
                        rail_kind: *rails,
                        media: media.clone().unwrap_or_else(memory_media),
                        intra_node: *intra_node,
                        window: *window,
                        seed: *seed,
                    },
                    ctx.clone(),
                    faults.clone(),
                ))
            }
            BackendConfig::Tcp { media, intra_node } => Arc::new(
                tcp::TcpBackend::start(id, media.clone().unwrap_or_else(memory_media), *intra_node, ctx.clone())
                    .map_err(|e| BackendStartError::Io("tcp".into(), e))?,
            ),
            BackendConfig::Memcpy { media } => Arc::new(memcpy::MemcpyBackend::new(
                id,
                media.clone().unwrap_or_else(memory_media),
                ctx.clone(),
            )),
            BackendConfig::File => Arc::new(file::FileBackend::new(id, ctx.clone())),
        };
        out.push(b);
    }
    Ok(out)
}
