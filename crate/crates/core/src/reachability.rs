//! Which (local rail, remote rail) pairs can carry a transfer between two
//! segments, and through which backend.

use alloc::vec::Vec;

use crate::capability::{BackendCapabilities, BackendId, Direction, MediaPair};
use crate::segment::Segment;
use crate::topology::{RailId, RailKind, Tier, TopologyGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RailPair {
    pub local: RailId,
    pub remote: RailId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReachabilityEntry {
    pub pair: RailPair,
    /// max(local tier, remote tier), raised to tier 2 when the remote rail is
    /// not the local rail's affinity partner.
    pub tier: Tier,
    pub directions: Vec<Direction>,
    pub backend: BackendId,
}

/// Initiator side of a transfer: the source for writes, the destination for reads.
pub fn initiator<'a>(src: &'a Segment, dst: &'a Segment, dir: Direction) -> (&'a Segment, &'a Segment) {
    match dir {
        Direction::Write => (src, dst),
        Direction::Read => (dst, src),
    }
}

/// Enumerates every feasible rail pair for moving bytes from `src` to `dst`
/// with `dir`, sorted by tier, then backend order, then rail ids. An empty
/// result is valid and means no direct path exists.
pub fn reachable_rails(
    graph: &TopologyGraph,
    backends: &[BackendCapabilities],
    src: &Segment,
    dst: &Segment,
    dir: Direction,
) -> Vec<ReachabilityEntry> {
    let media = MediaPair::new(src.medium(), dst.medium());
    let (local_seg, remote_seg) = initiator(src, dst, dir);
    let same_node = src.node() == dst.node();
    let mut out = Vec::new();

    for caps in backends {
        if !caps.covers(media, dir, same_node) {
            continue;
        }
        let directions: Vec<Direction> = [Direction::Read, Direction::Write]
            .into_iter()
            .filter(|d| caps.covers(media, *d, same_node))
            .collect();
        match caps.rail_kind {
            RailKind::Intra | RailKind::Storage => {
                if !same_node {
                    continue;
                }
                let node = graph.node(local_seg.node());
                let rail = if caps.rail_kind == RailKind::Intra {
                    node.local_rail
                } else {
                    node.storage_rail
                };
                out.push(ReachabilityEntry {
                    pair: RailPair {
                        local: rail,
                        remote: rail,
                    },
                    tier: Tier::One,
                    directions,
                    backend: caps.id,
                });
            }
            RailKind::Nic => {
                let local_node = graph.node(local_seg.node());
                let remote_node = graph.node(remote_seg.node());
                for &l in &local_node.nic_rails {
                    let partner = graph.affinity_partner(l, remote_node.id);
                    for &r in &remote_node.nic_rails {
                        if !graph.connected(l, r) {
                            continue;
                        }
                        let tier = pair_tier(
                            graph.tier_from(local_seg.device(), l),
                            graph.tier_from(remote_seg.device(), r),
                            partner == Some(r),
                        );
                        out.push(ReachabilityEntry {
                            pair: RailPair {
                                local: l,
                                remote: r,
                            },
                            tier,
                            directions: directions.clone(),
                            backend: caps.id,
                        });
                    }
                }
            }
        }
    }
    out.sort_by_key(|e| (e.tier, e.backend, e.pair));
    out
}

pub fn pair_tier(local: Tier, remote: Tier, aligned: bool) -> Tier {
    let base = local.max(remote);
    if aligned {
        base
    } else {
        base.max(Tier::Two)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::{BufferDesc, Medium, SegmentDesc, SegmentHandle};
    use crate::topology::{Affinity, NodeId, NodeSpec, RailSpec, SimLinkParams, TopologySpec};
    use alloc::format;
    use alloc::string::String;
    use alloc::vec;
    use proptest::prelude::*;

    pub(crate) fn two_nodes(rails_per_node: usize, network_b: &str) -> TopologyGraph {
        let mut rails = Vec::new();
        for (n, net) in [("a", "default"), ("b", network_b)] {
            for i in 0..rails_per_node {
                rails.push(RailSpec {
                    id: format!("{n}{i}"),
                    node: n.into(),
                    bandwidth_bytes_per_sec: 1_000,
                    affinity: Affinity::Direct,
                    network: String::from(net),
                    sim: SimLinkParams::default(),
                });
            }
        }
        TopologyGraph::from_spec(&TopologySpec {
            nodes: vec![
                NodeSpec {
                    id: "a".into(),
                    local_bandwidth_bytes_per_sec: 1,
                    storage_bandwidth_bytes_per_sec: 1,
                },
                NodeSpec {
                    id: "b".into(),
                    local_bandwidth_bytes_per_sec: 1,
                    storage_bandwidth_bytes_per_sec: 1,
                },
            ],
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
                buffers: vec![BufferDesc { offset: 0, len: 1 << 20 }],
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

    const HH: MediaPair = MediaPair::new(Medium::Host, Medium::Host);

    #[test]
    fn same_node_memory_copy_is_one_tier_one_entry() {
        let g = two_nodes(2, "default");
        let mem = caps(0, RailKind::Intra, vec![HH], false, true);
        let a = seg(&g, 0, 0, Medium::Host);
        let b = seg(&g, 1, 0, Medium::Host);
        let r = reachable_rails(&g, &[mem], &a, &b, Direction::Write);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].tier, Tier::One);
        assert_eq!(r[0].pair.local, g.node(NodeId(0)).local_rail);
    }

    #[test]
    fn cross_node_aligned_pairs_are_tier_one() {
        let g = two_nodes(8, "default");
        let net = caps(0, RailKind::Nic, vec![HH], true, false);
        let a = seg(&g, 0, 0, Medium::Host);
        let b = seg(&g, 1, 1, Medium::Host);
        let r = reachable_rails(&g, &[net], &a, &b, Direction::Write);
        assert_eq!(r.len(), 64);
        let tier1: Vec<_> = r.iter().filter(|e| e.tier == Tier::One).collect();
        assert_eq!(tier1.len(), 8);
        for e in &tier1 {
            assert_eq!(
                g.rail(e.pair.local).index_in_node,
                g.rail(e.pair.remote).index_in_node
            );
        }
        assert!(r.iter().filter(|e| e.tier != Tier::One).all(|e| e.tier >= Tier::Two));
        assert!(r.windows(2).all(|w| w[0].tier <= w[1].tier));
    }

    #[test]
    fn unsupported_media_or_disconnected_nodes_yield_nothing() {
        let g = two_nodes(2, "default");
        let net = caps(0, RailKind::Nic, vec![HH], true, false);
        let a = seg(&g, 0, 0, Medium::File);
        let b = seg(&g, 1, 1, Medium::Host);
        assert!(reachable_rails(&g, core::slice::from_ref(&net), &a, &b, Direction::Write).is_empty());

        let g = two_nodes(2, "island");
        let a = seg(&g, 0, 0, Medium::Host);
        let b = seg(&g, 1, 1, Medium::Host);
        assert!(reachable_rails(&g, &[net], &a, &b, Direction::Write).is_empty());
    }

    proptest! {
        #[test]
        fn read_and_reverse_write_see_the_same_pairs(
            rails in 1usize..5,
            src_node in 0u32..2,
            dst_node in 0u32..2,
            media in proptest::sample::select(vec![Medium::Host, Medium::Device]),
        ) {
            let g = two_nodes(rails, "default");
            let both = vec![
                HH,
                MediaPair::new(Medium::Host, Medium::Device),
                MediaPair::new(Medium::Device, Medium::Host),
                MediaPair::new(Medium::Device, Medium::Device),
            ];
            let backends = vec![
                caps(0, RailKind::Intra, both.clone(), false, true),
                caps(1, RailKind::Nic, both, true, true),
            ];
            let s = seg(&g, 0, src_node, media);
            let d = seg(&g, 1, dst_node, Medium::Host);
            let read: Vec<_> = reachable_rails(&g, &backends, &s, &d, Direction::Read)
                .into_iter().map(|e| (e.pair, e.backend, e.tier)).collect();
            let write: Vec<_> = reachable_rails(&g, &backends, &d, &s, Direction::Write)
                .into_iter().map(|e| (e.pair, e.backend, e.tier)).collect();
            prop_assert_eq!(read, write);
        }
    }
}
