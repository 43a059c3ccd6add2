//! Declarative fabric description: nodes, rails, devices and their affinity
//! tiers.
//!
//! A [`TopologySpec`] is the raw, serde-facing document; [`TopologyGraph`] is
//! the validated, immutable form every routing decision is grounded in.
//! Runtime health never lives here.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::segment::Medium;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RailId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DeviceId(pub u32);

impl RailId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for RailId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rail{}", self.0)
    }
}

/// Declared placement of a rail relative to the memory it serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Affinity {
    Direct,
    SameSocket,
    CrossSocket,
}

impl Affinity {
    pub fn tier(self) -> Tier {
        match self {
            Affinity::Direct => Tier::One,
            Affinity::SameSocket => Tier::Two,
            Affinity::CrossSocket => Tier::Three,
        }
    }
}

/// Affinity class of a rail (or rail pair). Lower is better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum Tier {
    One = 1,
    Two = 2,
    Three = 3,
}

impl Tier {
    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Option<Tier> {
        match n {
            1 => Some(Tier::One),
            2 => Some(Tier::Two),
            3 => Some(Tier::Three),
            _ => None,
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tier-{}", self.number())
    }
}

/// Score multiplier for a tier. `Unschedulable` keeps a rail reachable for
/// failover bookkeeping but out of every candidate set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    Finite(f64),
    Unschedulable,
}

impl Penalty {
    pub fn factor(self) -> Option<f64> {
        match self {
            Penalty::Finite(p) => Some(p),
            Penalty::Unschedulable => None,
        }
    }

    fn rank(self) -> (u8, f64) {
        match self {
            Penalty::Finite(p) => (0, p),
            Penalty::Unschedulable => (1, 0.0),
        }
    }
}

#[cfg(feature = "serde")]
impl Serialize for Penalty {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Penalty::Finite(p) => s.serialize_f64(*p),
            Penalty::Unschedulable => s.serialize_str("unschedulable"),
        }
    }
}

#[cfg(feature = "serde")]
impl<'de> Deserialize<'de> for Penalty {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Float(f64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(Penalty::Finite(v as f64)),
            Raw::Float(v) => Ok(Penalty::Finite(v)),
            Raw::Word(w) if w == "unschedulable" || w == "inf" => Ok(Penalty::Unschedulable),
            Raw::Word(w) => Err(serde::de::Error::custom(alloc::format!(
                "unknown penalty `{w}` (expected a number or \"unschedulable\")"
            ))),
        }
    }
}

/// Per-tier score multipliers. Defaults are 1, 3 and unschedulable.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TierPenalties {
    pub tier1: Penalty,
    pub tier2: Penalty,
    pub tier3: Penalty,
}

impl Default for TierPenalties {
    fn default() -> Self {
        TierPenalties {
            tier1: Penalty::Finite(1.0),
            tier2: Penalty::Finite(3.0),
            tier3: Penalty::Unschedulable,
        }
    }
}

impl TierPenalties {
    pub fn get(&self, tier: Tier) -> Penalty {
        match tier {
            Tier::One => self.tier1,
            Tier::Two => self.tier2,
            Tier::Three => self.tier3,
        }
    }

    /// Penalties must be positive and non-decreasing in tier number.
    pub fn is_valid(&self) -> bool {
        let ranks = [self.tier1.rank(), self.tier2.rank(), self.tier3.rank()];
        let positive = [self.tier1, self.tier2, self.tier3]
            .iter()
            .all(|p| p.factor().is_none_or(|f| f > 0.0 && f.is_finite()));
        positive
            && ranks
                .windows(2)
                .all(|w| w[0].0 < w[1].0 || (w[0].0 == w[1].0 && w[0].1 <= w[1].1))
    }
}

/// What a rail physically is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RailKind {
    /// A network endpoint that can reach other nodes.
    #[default]
    Nic,
    /// The node-local copy engine (memcpy / DMA engine).
    Intra,
    /// The node-local storage path.
    Storage,
}

/// Link characteristics the simulated fabric uses. The scheduler never reads
/// these; it only sees the declared bandwidth.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SimLinkParams {
    /// Fixed per-slice latency in microseconds.
    pub latency_us: f64,
    /// Service-time multiplier on the bandwidth term (3.0 = three times slower).
    pub service_factor: f64,
    /// Probability that a slice hits a stall on this link.
    pub stall_prob: f64,
    /// Stall length in microseconds.
    pub stall_us: f64,
    /// Upper bound of uniform per-slice jitter in microseconds.
    pub jitter_us: f64,
    /// Probability that a slice completes late without holding the link.
    pub delay_prob: f64,
    /// Extra completion delay for such a slice, microseconds.
    pub delay_us: f64,
}

impl Default for SimLinkParams {
    fn default() -> Self {
        SimLinkParams {
            latency_us: 5.0,
            service_factor: 1.0,
            stall_prob: 0.0,
            stall_us: 0.0,
            jitter_us: 0.0,
            delay_prob: 0.0,
            delay_us: 0.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Raw document
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TopologySpec {
    pub nodes: Vec<NodeSpec>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub rails: Vec<RailSpec>,
    #[cfg_attr(feature = "serde", serde(default))]
    pub devices: Vec<DeviceSpec>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct NodeSpec {
    pub id: String,
    /// Bandwidth of the implicit intra-node copy rail.
    #[cfg_attr(feature = "serde", serde(default = "default_local_bandwidth"))]
    pub local_bandwidth_bytes_per_sec: i64,
    /// Bandwidth of the implicit storage rail.
    #[cfg_attr(feature = "serde", serde(default = "default_storage_bandwidth"))]
    pub storage_bandwidth_bytes_per_sec: i64,
}

#[cfg(feature = "serde")]
fn default_local_bandwidth() -> i64 {
    50_000_000_000
}

#[cfg(feature = "serde")]
fn default_storage_bandwidth() -> i64 {
    6_000_000_000
}

#[cfg(feature = "serde")]
fn default_network() -> String {
    String::from("default")
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct RailSpec {
    pub id: String,
    pub node: String,
    pub bandwidth_bytes_per_sec: i64,
    pub affinity: Affinity,
    /// Rails only reach rails on the same network.
    #[cfg_attr(feature = "serde", serde(default = "default_network"))]
    pub network: String,
    #[cfg_attr(feature = "serde", serde(default))]
    pub sim: SimLinkParams,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DeviceSpec {
    pub id: String,
    pub node: String,
    pub medium: Medium,
    #[cfg_attr(feature = "serde", serde(default))]
    pub links: Vec<LinkSpec>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LinkSpec {
    pub rail: String,
    pub affinity: Affinity,
}

// ---------------------------------------------------------------------------
// Validated graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TopologyError {
    #[error("topology declares no nodes")]
    Empty,
    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },
    #[error("{from} references unknown {kind} `{id}`")]
    DanglingReference {
        from: String,
        kind: &'static str,
        id: String,
    },
    #[error("rail `{rail}` has non-positive bandwidth {bandwidth}")]
    NonPositiveBandwidth { rail: String, bandwidth: i64 },
    #[error("device `{device}` links rail `{rail}` which lives on another node")]
    CrossNodeLink { device: String, rail: String },
    #[error("simulator parameters of rail `{rail}` are out of range")]
    InvalidSimParams { rail: String },
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize))]
pub struct NodeInfo {
    pub id: NodeId,
    pub name: String,
    pub local_rail: RailId,
    pub storage_rail: RailId,
    /// NIC rails of this node, in declaration order.
    pub nic_rails: Vec<RailId>,
    pub host_device: DeviceId,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize))]
pub struct RailInfo {
    pub id: RailId,
    pub name: String,
    pub node: NodeId,
    pub kind: RailKind,
    /// B_d in bytes per second.
    pub bandwidth: f64,
    pub affinity: Affinity,
    pub tier: Tier,
    /// Position among the node's NIC rails; drives 1:1 remote pairing.
    pub index_in_node: u32,
    pub network: String,
    pub sim: SimLinkParams,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize))]
pub struct DeviceInfo {
    pub id: DeviceId,
    pub name: String,
    pub node: NodeId,
    pub medium: Medium,
    /// Per-rail affinity overrides declared by links.
    pub links: BTreeMap<RailId, Affinity>,
}

/// Immutable, validated fabric.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize))]
pub struct TopologyGraph {
    nodes: Vec<NodeInfo>,
    rails: Vec<RailInfo>,
    devices: Vec<DeviceInfo>,
}

impl TopologyGraph {
    pub fn from_spec(spec: &TopologySpec) -> Result<Self, TopologyError> {
        if spec.nodes.is_empty() {
            return Err(TopologyError::Empty);
        }
        let mut node_index: BTreeMap<&str, NodeId> = BTreeMap::new();
        let mut rail_index: BTreeMap<String, RailId> = BTreeMap::new();
        let mut nodes = Vec::with_capacity(spec.nodes.len());
        let mut rails: Vec<RailInfo> = Vec::new();
        let mut devices: Vec<DeviceInfo> = Vec::new();

        for (i, n) in spec.nodes.iter().enumerate() {
            let id = NodeId(i as u32);
            if node_index.insert(n.id.as_str(), id).is_some() {
                return Err(TopologyError::DuplicateId {
                    kind: "node",
                    id: n.id.clone(),
                });
            }
            let local_name = alloc::format!("{}/local", n.id);
            let storage_name = alloc::format!("{}/storage", n.id);
            for (name, bw, kind) in [
                (&local_name, n.local_bandwidth_bytes_per_sec, RailKind::Intra),
                (&storage_name, n.storage_bandwidth_bytes_per_sec, RailKind::Storage),
            ] {
                if bw <= 0 {
                    return Err(TopologyError::NonPositiveBandwidth {
                        rail: name.clone(),
                        bandwidth: bw,
                    });
                }
                let rid = RailId(rails.len() as u32);
                rail_index.insert(name.clone(), rid);
                rails.push(RailInfo {
                    id: rid,
                    name: name.clone(),
                    node: id,
                    kind,
                    bandwidth: bw as f64,
                    affinity: Affinity::Direct,
                    tier: Tier::One,
                    index_in_node: 0,
                    network: alloc::format!("{}/internal", n.id),
                    sim: SimLinkParams {
                        latency_us: 1.0,
                        ..SimLinkParams::default()
                    },
                });
            }
            let host = DeviceId(devices.len() as u32);
            devices.push(DeviceInfo {
                id: host,
                name: alloc::format!("{}/host", n.id),
                node: id,
                medium: Medium::Host,
                links: BTreeMap::new(),
            });
            nodes.push(NodeInfo {
                id,
                name: n.id.clone(),
                local_rail: RailId(rails.len() as u32 - 2),
                storage_rail: RailId(rails.len() as u32 - 1),
                nic_rails: Vec::new(),
                host_device: host,
            });
        }

        for r in &spec.rails {
            let node = *node_index
                .get(r.node.as_str())
                .ok_or_else(|| TopologyError::DanglingReference {
                    from: alloc::format!("rail `{}`", r.id),
                    kind: "node",
                    id: r.node.clone(),
                })?;
            if r.bandwidth_bytes_per_sec <= 0 {
                return Err(TopologyError::NonPositiveBandwidth {
                    rail: r.id.clone(),
                    bandwidth: r.bandwidth_bytes_per_sec,
                });
            }
            let s = &r.sim;
            let sane = s.latency_us >= 0.0
                && s.service_factor > 0.0
                && (0.0..=1.0).contains(&s.stall_prob)
                && s.stall_us >= 0.0
                && s.jitter_us >= 0.0
                && (0.0..=1.0).contains(&s.delay_prob)
                && s.delay_us >= 0.0
                && [s.latency_us, s.service_factor, s.stall_us, s.jitter_us, s.delay_us]
                    .iter()
                    .all(|v| v.is_finite());
            if !sane {
                return Err(TopologyError::InvalidSimParams { rail: r.id.clone() });
            }
            let rid = RailId(rails.len() as u32);
            if rail_index.insert(r.id.clone(), rid).is_some() {
                return Err(TopologyError::DuplicateId {
                    kind: "rail",
                    id: r.id.clone(),
                });
            }
            let info = &mut nodes[node.index()];
            let index_in_node = info.nic_rails.len() as u32;
            info.nic_rails.push(rid);
            rails.push(RailInfo {
                id: rid,
                name: r.id.clone(),
                node,
                kind: RailKind::Nic,
                bandwidth: r.bandwidth_bytes_per_sec as f64,
                affinity: r.affinity,
                tier: r.affinity.tier(),
                index_in_node,
                network: r.network.clone(),
                sim: r.sim,
            });
        }

        let mut device_names: BTreeMap<String, ()> =
            devices.iter().map(|d| (d.name.clone(), ())).collect();
        for d in &spec.devices {
            let node = *node_index
                .get(d.node.as_str())
                .ok_or_else(|| TopologyError::DanglingReference {
                    from: alloc::format!("device `{}`", d.id),
                    kind: "node",
                    id: d.node.clone(),
                })?;
            if device_names.insert(d.id.clone(), ()).is_some() {
                return Err(TopologyError::DuplicateId {
                    kind: "device",
                    id: d.id.clone(),
                });
            }
            let mut links = BTreeMap::new();
            for l in &d.links {
                let rid = *rail_index
                    .get(&l.rail)
                    .ok_or_else(|| TopologyError::DanglingReference {
                        from: alloc::format!("device `{}`", d.id),
                        kind: "rail",
                        id: l.rail.clone(),
                    })?;
                if rails[rid.index()].node != node {
                    return Err(TopologyError::CrossNodeLink {
                        device: d.id.clone(),
                        rail: l.rail.clone(),
                    });
                }
                links.insert(rid, l.affinity);
            }
            devices.push(DeviceInfo {
                id: DeviceId(devices.len() as u32),
                name: d.id.clone(),
                node,
                medium: d.medium,
                links,
            });
        }

        Ok(TopologyGraph {
            nodes,
            rails,
            devices,
        })
    }

    pub fn nodes(&self) -> &[NodeInfo] {
        &self.nodes
    }

    pub fn rails(&self) -> &[RailInfo] {
        &self.rails
    }

    pub fn devices(&self) -> &[DeviceInfo] {
        &self.devices
    }

    pub fn node(&self, id: NodeId) -> &NodeInfo {
        &self.nodes[id.index()]
    }

    pub fn rail(&self, id: RailId) -> &RailInfo {
        &self.rails[id.index()]
    }

    pub fn device(&self, id: DeviceId) -> &DeviceInfo {
        &self.devices[id.0 as usize]
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.name == name).map(|n| n.id)
    }

    pub fn rail_by_name(&self, name: &str) -> Option<RailId> {
        self.rails.iter().find(|r| r.name == name).map(|r| r.id)
    }

    pub fn device_by_name(&self, name: &str) -> Option<DeviceId> {
        self.devices.iter().find(|d| d.name == name).map(|d| d.id)
    }

    pub fn nic_rails(&self) -> impl Iterator<Item = &RailInfo> {
        self.rails.iter().filter(|r| r.kind == RailKind::Nic)
    }

    /// Tier of `rail` as seen from memory attached to `device`: an explicit
    /// device link wins, otherwise the rail's declared affinity.
    pub fn tier_from(&self, device: DeviceId, rail: RailId) -> Tier {
        let info = self.rail(rail);
        if info.kind != RailKind::Nic {
            return Tier::One;
        }
        self.device(device)
            .links
            .get(&rail)
            .map(|a| a.tier())
            .unwrap_or(info.tier)
    }

    /// Two NIC rails can exchange traffic when they share a network.
    pub fn connected(&self, a: RailId, b: RailId) -> bool {
        let (ra, rb) = (self.rail(a), self.rail(b));
        ra.kind == RailKind::Nic && rb.kind == RailKind::Nic && ra.network == rb.network
    }

    /// Affinity-aligned remote partner of `local` on `remote_node`: the NIC rail
    /// with the same in-node index.
    pub fn affinity_partner(&self, local: RailId, remote_node: NodeId) -> Option<RailId> {
        let idx = self.rail(local).index_in_node as usize;
        self.node(remote_node)
            .nic_rails
            .get(idx)
            .copied()
            .filter(|r| self.connected(local, *r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn rail(id: &str, node: &str, bw: i64, affinity: Affinity) -> RailSpec {
        RailSpec {
            id: id.into(),
            node: node.into(),
            bandwidth_bytes_per_sec: bw,
            affinity,
            network: "default".into(),
            sim: SimLinkParams::default(),
        }
    }

    fn node(id: &str) -> NodeSpec {
        NodeSpec {
            id: id.into(),
            local_bandwidth_bytes_per_sec: default_local_bandwidth(),
            storage_bandwidth_bytes_per_sec: default_storage_bandwidth(),
        }
    }

    #[test]
    fn uniform_two_by_eight_is_all_tier_one() {
        let mut spec = TopologySpec {
            nodes: vec![node("a"), node("b")],
            rails: vec![],
            devices: vec![],
        };
        for n in ["a", "b"] {
            for i in 0..8 {
                spec.rails
                    .push(rail(&alloc::format!("{n}{i}"), n, 25_000_000_000, Affinity::Direct));
            }
        }
        let g = TopologyGraph::from_spec(&spec).unwrap();
        let nics: Vec<_> = g.nic_rails().collect();
        assert_eq!(nics.len(), 16);
        assert!(nics.iter().all(|r| r.tier == Tier::One));
    }

    #[test]
    fn zero_bandwidth_is_rejected() {
        let spec = TopologySpec {
            nodes: vec![node("a")],
            rails: vec![rail("a0", "a", 0, Affinity::Direct)],
            devices: vec![],
        };
        assert!(matches!(
            TopologyGraph::from_spec(&spec),
            Err(TopologyError::NonPositiveBandwidth { bandwidth: 0, .. })
        ));
    }

    #[test]
    fn mixed_affinity_node_classifies_tiers() {
        let affinities = [
            Affinity::Direct,
            Affinity::SameSocket,
            Affinity::SameSocket,
            Affinity::SameSocket,
            Affinity::CrossSocket,
            Affinity::CrossSocket,
            Affinity::CrossSocket,
            Affinity::CrossSocket,
        ];
        let spec = TopologySpec {
            nodes: vec![node("a")],
            rails: affinities
                .iter()
                .enumerate()
                .map(|(i, a)| rail(&alloc::format!("a{i}"), "a", 1, *a))
                .collect(),
            devices: vec![],
        };
        let g = TopologyGraph::from_spec(&spec).unwrap();
        let tiers: Vec<u8> = g.nic_rails().map(|r| r.tier.number()).collect();
        assert_eq!(tiers, vec![1, 2, 2, 2, 3, 3, 3, 3]);
    }

    #[test]
    fn dangling_and_duplicate_references() {
        let spec = TopologySpec {
            nodes: vec![node("a")],
            rails: vec![rail("a0", "zz", 1, Affinity::Direct)],
            devices: vec![],
        };
        assert!(matches!(
            TopologyGraph::from_spec(&spec),
            Err(TopologyError::DanglingReference { kind: "node", .. })
        ));

        let spec = TopologySpec {
            nodes: vec![node("a")],
            rails: vec![
                rail("a0", "a", 1, Affinity::Direct),
                rail("a0", "a", 1, Affinity::Direct),
            ],
            devices: vec![],
        };
        assert!(matches!(
            TopologyGraph::from_spec(&spec),
            Err(TopologyError::DuplicateId { kind: "rail", .. })
        ));

        let spec = TopologySpec {
            nodes: vec![node("a"), node("b")],
            rails: vec![rail("b0", "b", 1, Affinity::Direct)],
            devices: vec![DeviceSpec {
                id: "gpu".into(),
                node: "a".into(),
                medium: Medium::Device,
                links: vec![LinkSpec {
                    rail: "b0".into(),
                    affinity: Affinity::Direct,
                }],
            }],
        };
        assert!(matches!(
            TopologyGraph::from_spec(&spec),
            Err(TopologyError::CrossNodeLink { .. })
        ));
    }

    #[test]
    fn device_links_override_rail_affinity() {
        let spec = TopologySpec {
            nodes: vec![node("a")],
            rails: vec![
                rail("a0", "a", 1, Affinity::Direct),
                rail("a1", "a", 1, Affinity::Direct),
            ],
            devices: vec![DeviceSpec {
                id: "gpu1".into(),
                node: "a".into(),
                medium: Medium::Device,
                links: vec![
                    LinkSpec {
                        rail: "a0".into(),
                        affinity: Affinity::SameSocket,
                    },
                    LinkSpec {
                        rail: "a1".into(),
                        affinity: Affinity::Direct,
                    },
                ],
            }],
        };
        let g = TopologyGraph::from_spec(&spec).unwrap();
        let gpu = g.device_by_name("gpu1").unwrap();
        let host = g.node(NodeId(0)).host_device;
        let a0 = g.rail_by_name("a0").unwrap();
        assert_eq!(g.tier_from(gpu, a0), Tier::Two);
        assert_eq!(g.tier_from(host, a0), Tier::One);
    }

    #[test]
    fn penalties_validate_monotonicity() {
        assert!(TierPenalties::default().is_valid());
        let bad = TierPenalties {
            tier1: Penalty::Finite(3.0),
            tier2: Penalty::Finite(1.0),
            tier3: Penalty::Unschedulable,
        };
        assert!(!bad.is_valid());
        let bad = TierPenalties {
            tier1: Penalty::Finite(1.0),
            tier2: Penalty::Unschedulable,
            tier3: Penalty::Finite(5.0),
        };
        assert!(!bad.is_valid());
        let all_inf = TierPenalties {
            tier1: Penalty::Finite(1.0),
            tier2: Penalty::Unschedulable,
            tier3: Penalty::Unschedulable,
        };
        assert!(all_inf.is_valid());
    }
}
