//! Route planning for one transfer.
//!
//! A plan is an ordered list of alternative routes. A direct route moves the
//! bytes with one backend; a staged route chains several hops through host
//! staging buffers. When a backend fails fatally the plan advances to the
//! first later route that does not use it.

use alloc::vec::Vec;

use crate::capability::{BackendCapabilities, BackendId, Direction};
use crate::reachability::{reachable_rails, RailPair};
use crate::segment::{Medium, Segment};
use crate::staging::StageKind;
use crate::topology::{NodeId, Tier, TopologyGraph};

/// Upper bound on staged alternatives kept per transfer.
const MAX_STAGED_ROUTES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairChoice {
    pub pair: RailPair,
    pub tier: Tier,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectRoute {
    pub backend: BackendId,
    /// Sorted by tier, then pair.
    pub pairs: Vec<PairChoice>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Source,
    Destination,
    /// Staging buffer on the given node.
    Staging(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hop {
    pub kind: StageKind,
    pub from: Endpoint,
    pub to: Endpoint,
    pub direction: Direction,
    pub backend: BackendId,
    pub pairs: Vec<PairChoice>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Route {
    Direct(DirectRoute),
    Staged(Vec<Hop>),
}

impl Route {
    pub fn uses(&self, backend: BackendId) -> bool {
        match self {
            Route::Direct(d) => d.backend == backend,
            Route::Staged(hops) => hops.iter().any(|h| h.backend == backend),
        }
    }

    /// Worst tier any hop is forced to use at best.
    pub fn best_tier(&self) -> Tier {
        let first = |p: &[PairChoice]| p.first().map_or(Tier::Three, |c| c.tier);
        match self {
            Route::Direct(d) => first(&d.pairs),
            Route::Staged(hops) => hops.iter().map(|h| first(&h.pairs)).max().unwrap_or(Tier::Three),
        }
    }

    pub fn is_staged(&self) -> bool {
        matches!(self, Route::Staged(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("no route between the segments")]
    NoRoute,
    #[error("all routes exhausted")]
    AllRoutesExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferPlan {
    routes: Vec<Route>,
    active: usize,
    failed: Vec<BackendId>,
}

impl TransferPlan {
    pub fn routes(&self) -> &[Route] {
        &self.routes
    }

    pub fn active_index(&self) -> usize {
        self.active
    }

    pub fn active(&self) -> &Route {
        &self.routes[self.active]
    }

    /// Drops staged alternatives. A transfer that starts on a direct route
    /// keeps its slice layout, so it can only move between direct routes.
    pub fn direct_only(mut self) -> Self {
        if !self.active().is_staged() {
            self.routes.retain(|r| !r.is_staged());
        }
        self
    }

    /// Records `failed` as unusable. Returns `Ok(true)` when the active route
    /// changed, `Ok(false)` when the active route does not use it.
    pub fn substitute(&mut self, failed: BackendId) -> Result<bool, PlanError> {
        if !self.failed.contains(&failed) {
            self.failed.push(failed);
        }
        if !self.routes[self.active].uses(failed) {
            return Ok(false);
        }
        let next = (self.active + 1..self.routes.len())
            .find(|&i| !self.failed.iter().any(|b| self.routes[i].uses(*b)));
        match next {
            Some(i) => {
                self.active = i;
                Ok(true)
            }
            None => Err(PlanError::AllRoutesExhausted),
        }
    }
}

fn group_by_backend(
    graph: &TopologyGraph,
    backends: &[BackendCapabilities],
    src: &Segment,
    dst: &Segment,
    dir: Direction,
) -> Vec<(BackendId, Vec<PairChoice>)> {
    let mut groups: Vec<(BackendId, Vec<PairChoice>)> = Vec::new();
    for e in reachable_rails(graph, backends, src, dst, dir) {
        let choice = PairChoice {
            pair: e.pair,
            tier: e.tier,
        };
        match groups.iter_mut().find(|(b, _)| *b == e.backend) {
            Some((_, v)) => v.push(choice),
            None => groups.push((e.backend, alloc::vec![choice])),
        }
    }
    // reachable_rails sorts by tier first, so each group's best pair is first
    groups.sort_by_key(|(b, v)| (v[0].tier, *b));
    groups
}

type HopOptions = (StageKind, Endpoint, Endpoint, Direction, Vec<(BackendId, Vec<PairChoice>)>);

/// Builds every route from `src` to `dst` over `backends` (the backends that
/// are currently usable). `staging` returns the staging segment of a node,
/// if it has one. Direct routes come first, best tier first.
pub fn build_plan<'a>(
    graph: &TopologyGraph,
    backends: &[BackendCapabilities],
    src: &'a Segment,
    dst: &'a Segment,
    dir: Direction,
    staging: impl Fn(NodeId) -> Option<&'a Segment>,
) -> Result<TransferPlan, PlanError> {
    let mut routes: Vec<Route> = group_by_backend(graph, backends, src, dst, dir)
        .into_iter()
        .map(|(backend, pairs)| Route::Direct(DirectRoute { backend, pairs }))
        .collect();

    if let Some(points) = staging_points(src, dst, &staging) {
        let mut per_hop: Vec<HopOptions> = Vec::new();
        for w in points.windows(2) {
            let (from, a) = w[0];
            let (to, b) = w[1];
            let kind = if a.medium() != Medium::Host {
                StageKind::DeviceToHost
            } else if b.medium() != Medium::Host {
                StageKind::HostToDevice
            } else {
                StageKind::HostToHost
            };
            let hop_dir = if a.node() == b.node() { Direction::Write } else { dir };
            let options = group_by_backend(graph, backends, a, b, hop_dir);
            per_hop.push((kind, from, to, hop_dir, options));
        }
        if per_hop.iter().all(|h| !h.4.is_empty()) {
            let mut staged: Vec<Vec<Hop>> = alloc::vec![Vec::new()];
            for (kind, from, to, hop_dir, options) in &per_hop {
                let mut next = Vec::new();
                for prefix in &staged {
                    for (backend, pairs) in options {
                        let mut r = prefix.clone();
                        r.push(Hop {
                            kind: *kind,
                            from: *from,
                            to: *to,
                            direction: *hop_dir,
                            backend: *backend,
                            pairs: pairs.clone(),
                        });
                        next.push(r);
                    }
                }
                next.truncate(MAX_STAGED_ROUTES);
                staged = next;
            }
            let mut staged: Vec<Route> = staged.into_iter().map(Route::Staged).collect();
            staged.sort_by_key(|r| r.best_tier());
            routes.extend(staged);
        }
    }

    if routes.is_empty() {
        return Err(PlanError::NoRoute);
    }
    Ok(TransferPlan {
        routes,
        active: 0,
        failed: Vec::new(),
    })
}

/// Hop endpoints of the staged path, or `None` when staging cannot help
/// (fewer than two hops, or a needed staging buffer is missing).
fn staging_points<'a>(
    src: &'a Segment,
    dst: &'a Segment,
    staging: &impl Fn(NodeId) -> Option<&'a Segment>,
) -> Option<Vec<(Endpoint, &'a Segment)>> {
    let mut points = alloc::vec![(Endpoint::Source, src)];
    if src.medium() != Medium::Host {
        points.push((Endpoint::Staging(src.node()), staging(src.node())?));
    }
    if dst.medium() != Medium::Host && dst.node() != src.node() {
        points.push((Endpoint::Staging(dst.node()), staging(dst.node())?));
    }
    points.push((Endpoint::Destination, dst));
    (points.len() >= 3).then_some(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capability::MediaPair;
    use crate::segment::{BufferDesc, SegmentDesc, SegmentHandle};
    use crate::topology::{Affinity, NodeSpec, RailKind, RailSpec, SimLinkParams, TopologySpec};
    use alloc::format;
    use alloc::vec;

    fn graph() -> TopologyGraph {
        let mut rails = Vec::new();
        for n in ["a", "b"] {
            for i in 0..2 {
                rails.push(RailSpec {
                    id: format!("{n}{i}"),
                    node: n.into(),
                    bandwidth_bytes_per_sec: 1_000,
                    affinity: Affinity::Direct,
                    network: "default".into(),
                    sim: SimLinkParams::default(),
                });
            }
        }
        let node = |id: &str| NodeSpec {
            id: id.into(),
            local_bandwidth_bytes_per_sec: 1,
            storage_bandwidth_bytes_per_sec: 1,
        };
        TopologyGraph::from_spec(&TopologySpec {
            nodes: vec![node("a"), node("b")],
            rails,
            devices: vec![],
        })
        .unwrap()
    }

    fn seg(g: &TopologyGraph, h: u32, node: u32, medium: Medium) -> Segment {
        Segment::new(
            g,
            SegmentHandle(h),
            &SegmentDesc {
                id: format!("s{h}"),
                node: NodeId(node),
                device: None,
                medium,
                buffers: vec![BufferDesc { offset: 0, len: 1 << 30 }],
            },
        )
        .unwrap()
    }

    fn caps(id: u16, kind: RailKind, media: Vec<MediaPair>, cross: bool, intra: bool) -> BackendCapabilities {
        BackendCapabilities {
            id: BackendId(id),
            name: format!("b{id}"),
            media,
            directions: vec![Direction::Read, Direction::Write],
            rail_kind: kind,
            cross_node: cross,
            intra_node: intra,
            max_post_bytes: u64::MAX,
            batched_post: true,
        }
    }

    const H: Medium = Medium::Host;
    const D: Medium = Medium::Device;

    fn memcpy() -> BackendCapabilities {
        caps(
            0,
            RailKind::Intra,
            vec![
                MediaPair::new(H, H),
                MediaPair::new(H, D),
                MediaPair::new(D, H),
                MediaPair::new(D, D),
            ],
            false,
            true,
        )
    }

    fn host_net(id: u16) -> BackendCapabilities {
        caps(id, RailKind::Nic, vec![MediaPair::new(H, H)], true, false)
    }

    fn device_net(id: u16) -> BackendCapabilities {
        caps(
            id,
            RailKind::Nic,
            vec![MediaPair::new(D, D), MediaPair::new(H, H)],
            true,
            false,
        )
    }

    #[test]
    fn device_to_device_without_device_network_is_staged() {
        let g = graph();
        let src = seg(&g, 0, 0, D);
        let dst = seg(&g, 1, 1, D);
        let st_a = seg(&g, 2, 0, H);
        let st_b = seg(&g, 3, 1, H);
        let staging = |n: NodeId| Some(if n.0 == 0 { &st_a } else { &st_b });
        let plan = build_plan(&g, &[memcpy(), host_net(1)], &src, &dst, Direction::Write, staging).unwrap();
        assert_eq!(plan.routes().len(), 1);
        let Route::Staged(hops) = plan.active() else {
            panic!("expected staged route");
        };
        let kinds: Vec<_> = hops.iter().map(|h| h.kind).collect();
        assert_eq!(
            kinds,
            vec![StageKind::DeviceToHost, StageKind::HostToHost, StageKind::HostToDevice]
        );
        assert_eq!(hops[1].backend, BackendId(1));
        assert_eq!(hops[0].from, Endpoint::Source);
        assert_eq!(hops[2].to, Endpoint::Destination);
    }

    #[test]
    fn direct_first_then_staged_fallback_then_exhaustion() {
        let g = graph();
        let src = seg(&g, 0, 0, D);
        let dst = seg(&g, 1, 1, D);
        let st_a = seg(&g, 2, 0, H);
        let st_b = seg(&g, 3, 1, H);
        let staging = |n: NodeId| Some(if n.0 == 0 { &st_a } else { &st_b });
        let backends = [memcpy(), device_net(1), host_net(2)];
        let mut plan = build_plan(&g, &backends, &src, &dst, Direction::Write, staging).unwrap();
        assert!(!plan.active().is_staged());
        assert_eq!(plan.substitute(BackendId(2)), Ok(false));
        // staged via backend 1 is skipped; staged via 2 was marked failed earlier
        assert_eq!(plan.substitute(BackendId(1)), Err(PlanError::AllRoutesExhausted));

        let mut plan = build_plan(&g, &backends, &src, &dst, Direction::Write, staging).unwrap();
        assert_eq!(plan.substitute(BackendId(1)), Ok(true));
        let Route::Staged(hops) = plan.active() else {
            panic!()
        };
        assert_eq!(hops[1].backend, BackendId(2));
        let before = plan.active_index();
        assert_eq!(plan.substitute(BackendId(1)), Ok(false));
        assert_eq!(plan.active_index(), before);
    }

    #[test]
    fn unreachable_pair_has_no_route() {
        let g = graph();
        let src = seg(&g, 0, 0, H);
        let dst = seg(&g, 1, 1, Medium::File);
        assert_eq!(
            build_plan(&g, &[memcpy(), host_net(1)], &src, &dst, Direction::Write, |_| None),
            Err(PlanError::NoRoute)
        );
    }

    #[test]
    fn active_index_only_moves_forward() {
        let g = graph();
        let src = seg(&g, 0, 0, H);
        let dst = seg(&g, 1, 1, H);
        let mut plan =
            build_plan(&g, &[host_net(0), host_net(1), host_net(2)], &src, &dst, Direction::Read, |_| None).unwrap();
        let mut last = 0;
        for b in [1, 0, 2, 1] {
            let _ = plan.substitute(BackendId(b));
            assert!(plan.active_index() >= last);
            last = plan.active_index();
        }
    }
}
