//! Core logic of the railspray transfer engine: topology, segments, route
//! planning, slice scheduling and rail health. Everything here is
//! allocation-only and free of IO, so it builds without `std`.

#![no_std]
// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod batch;
pub mod capability;
pub mod plan;
pub mod reachability;
pub mod resilience;
pub mod scheduler;
pub mod segment;
pub mod slice;
pub mod staging;
pub mod topology;
pub mod wire;

pub use batch::{BatchControlBlock, BatchError, BatchState, BatchStatus, FailureReason};
pub use capability::{BackendCapabilities, BackendId, Direction, MediaPair};
pub use plan::{build_plan, PlanError, Route, TransferPlan};
pub use reachability::{reachable_rails, RailPair, ReachabilityEntry};
pub use resilience::{HealthConfig, HealthState, RailHealth, RetryPolicy};
pub use scheduler::{Policy, SchedulerConfig};
pub use segment::{Medium, Segment, SegmentDesc, SegmentHandle, SegmentTable};
pub use slice::{BatchId, CompletionEvent, CompletionStatus, SliceId, SliceWorkRequest, WorkId};
pub use staging::{StageKind, StagedPipeline, StagingConfig};
pub use topology::{NodeId, RailId, Tier, TierPenalties, TopologyGraph, TopologySpec};
