//! Fault schedules for the simulated fabric.
//!
//! ```toml
//! [[faults]]
//! rail = "a0"
//! effect = "down"
//! start_ms = 1000
//! end_ms = 3000
//!
//! [[faults]]
//! rail = "a3"
//! effect = "degrade"
//! factor = 0.25
//! start_ms = 0
//! ```
//!
//! `end_ms` may be omitted for faults that never clear.

use serde::{Deserialize, Serialize};

use railspray_core::topology::{RailId, TopologyGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum FaultEffect {
    /// Every slice touching the rail fails.
    Down,
    /// Bandwidth multiplied by `factor` (0.25 = four times slower).
    Degrade { factor: f64 },
    /// Extra uniform service delay in `[0, max_us)`.
    Jitter { max_us: f64 },
    /// Slices complete and move their data, but no completion is reported.
    DropCompletion,
}

impl FaultEffect {
    fn kind(&self) -> u8 {
        match self {
            FaultEffect::Down => 0,
            FaultEffect::Degrade { .. } => 1,
            FaultEffect::Jitter { .. } => 2,
            FaultEffect::DropCompletion => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub rail: String,
    pub start_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_ms: Option<f64>,
    #[serde(flatten)]
    pub effect: FaultEffect,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultScheduleFile {
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

#[derive(Debug, thiserror::Error)]
pub enum FaultError {
    #[error("fault schedule does not parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("fault references unknown rail `{0}`")]
    UnknownRail(String),
    #[error("fault on `{0}` has an empty or negative interval")]
    BadInterval(String),
    #[error("fault on `{0}` has an out-of-range parameter")]
    BadParameter(String),
    #[error("overlapping faults of the same kind on `{0}`")]
    Overlap(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub start_ns: u64,
    pub end_ns: u64,
    pub effect: FaultEffect,
}

impl Fault {
    fn active_at(&self, t: u64) -> bool {
        self.start_ns <= t && t < self.end_ns
    }
}

/// Resolved schedule, indexed by rail.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FaultSchedule {
    per_rail: Vec<Vec<Fault>>,
}

fn ms_to_ns(ms: f64) -> u64 {
    (ms * 1e6).round() as u64
}

impl FaultSchedule {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn parse(text: &str, graph: &TopologyGraph) -> Result<Self, FaultError> {
        let file: FaultScheduleFile = toml::from_str(text)?;
        Self::resolve(&file, graph)
    }

    pub fn resolve(file: &FaultScheduleFile, graph: &TopologyGraph) -> Result<Self, FaultError> {
        let mut faults = Vec::new();
        for f in &file.faults {
            let rail = graph
                .rail_by_name(&f.rail)
                .ok_or_else(|| FaultError::UnknownRail(f.rail.clone()))?;
            let end = f.end_ms.map_or(u64::MAX, ms_to_ns);
            if !(f.start_ms >= 0.0) || f.end_ms.is_some_and(|e| !(e > f.start_ms)) {
                return Err(FaultError::BadInterval(f.rail.clone()));
            }
            let ok = match f.effect {
                FaultEffect::Degrade { factor } => factor > 0.0 && factor.is_finite(),
                FaultEffect::Jitter { max_us } => max_us >= 0.0 && max_us.is_finite(),
                _ => true,
            };
            if !ok {
                return Err(FaultError::BadParameter(f.rail.clone()));
            }
            faults.push((
                rail,
                Fault {
                    start_ns: ms_to_ns(f.start_ms),
                    end_ns: end,
                    effect: f.effect,
                },
            ));
        }
        Self::from_faults(graph.rails().len(), faults).map_err(|rail| FaultError::Overlap(graph.rail(rail).name.clone()))
    }

    /// Builds a schedule directly. Fails with the offending rail when two
    /// faults of the same kind overlap on it.
    pub fn from_faults(rails: usize, faults: Vec<(RailId, Fault)>) -> Result<Self, RailId> {
        let mut per_rail = vec![Vec::new(); rails];
        for (rail, f) in faults {
            per_rail[rail.index()].push(f);
        }
        for (i, list) in per_rail.iter_mut().enumerate() {
            list.sort_by_key(|f: &Fault| (f.effect.kind(), f.start_ns));
            for w in list.windows(2) {
                if w[0].effect.kind() == w[1].effect.kind() && w[1].start_ns < w[0].end_ns {
                    return Err(RailId(i as u32));
                }
            }
        }
        Ok(FaultSchedule { per_rail })
    }

    fn of(&self, rail: RailId) -> &[Fault] {
        self.per_rail.get(rail.index()).map_or(&[], |v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.per_rail.iter().all(|v| v.is_empty())
    }

    /// Earliest instant in `[start, end]` at which `rail` is down.
    pub fn first_down(&self, rail: RailId, start: u64, end: u64) -> Option<u64> {
        self.of(rail)
            .iter()
            .filter(|f| f.effect == FaultEffect::Down && f.start_ns <= end && start < f.end_ns)
            .map(|f| f.start_ns.max(start))
            .min()
    }

    pub fn is_down(&self, rail: RailId, t: u64) -> bool {
        self.first_down(rail, t, t).is_some()
    }

    pub fn degrade_at(&self, rail: RailId, t: u64) -> f64 {
        self.of(rail)
            .iter()
            .filter(|f| f.active_at(t))
            .filter_map(|f| match f.effect {
                FaultEffect::Degrade { factor } => Some(factor),
                _ => None,
            })
            .product()
    }

    pub fn jitter_at(&self, rail: RailId, t: u64) -> f64 {
        self.of(rail)
            .iter()
            .filter(|f| f.active_at(t))
            .filter_map(|f| match f.effect {
                FaultEffect::Jitter { max_us } => Some(max_us),
                _ => None,
            })
            .sum()
    }

    pub fn drops_at(&self, rail: RailId, t: u64) -> bool {
        self.of(rail)
            .iter()
            .any(|f| f.effect == FaultEffect::DropCompletion && f.active_at(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use railspray_core::topology::{Affinity, NodeSpec, RailSpec, SimLinkParams, TopologySpec};

    fn graph() -> TopologyGraph {
        TopologyGraph::from_spec(&TopologySpec {
            nodes: vec![NodeSpec {
                id: "a".into(),
                local_bandwidth_bytes_per_sec: 1,
                storage_bandwidth_bytes_per_sec: 1,
            }],
            rails: vec![RailSpec {
                id: "a0".into(),
                node: "a".into(),
                bandwidth_bytes_per_sec: 1,
                affinity: Affinity::Direct,
                network: "default".into(),
                sim: SimLinkParams::default(),
            }],
            devices: vec![],
        })
        .unwrap()
    }

    #[test]
    fn parses_all_effects() {
        let g = graph();
        let s = FaultSchedule::parse(
            r#"
            [[faults]]
            rail = "a0"
            effect = "down"
            start_ms = 1000
            end_ms = 3000

            [[faults]]
            rail = "a0"
            effect = "degrade"
            factor = 0.25
            start_ms = 0
            end_ms = 10

            [[faults]]
            rail = "a0"
            effect = "jitter"
            max_us = 5.0
            start_ms = 0

            [[faults]]
            rail = "a0"
            effect = "drop_completion"
            start_ms = 4000
            end_ms = 4001
            "#,
            &g,
        )
        .unwrap();
        let r = g.rail_by_name("a0").unwrap();
        assert!(s.is_down(r, 1_000_000_000));
        assert!(!s.is_down(r, 3_000_000_000));
        assert_eq!(s.first_down(r, 0, 2_000_000_000), Some(1_000_000_000));
        assert_eq!(s.degrade_at(r, 5), 0.25);
        assert_eq!(s.degrade_at(r, 10_000_000), 1.0);
        assert_eq!(s.jitter_at(r, u64::MAX - 1), 5.0);
        assert!(s.drops_at(r, 4_000_500_000));
    }

    #[test]
    fn rejects_bad_schedules() {
        let g = graph();
        let overlap = r#"
            [[faults]]
            rail = "a0"
            effect = "down"
            start_ms = 0
            end_ms = 10
            [[faults]]
            rail = "a0"
            effect = "down"
            start_ms = 5
        "#;
        assert!(matches!(FaultSchedule::parse(overlap, &g), Err(FaultError::Overlap(_))));
        let unknown = "[[faults]]\nrail = \"zz\"\neffect = \"down\"\nstart_ms = 0\n";
        assert!(matches!(FaultSchedule::parse(unknown, &g), Err(FaultError::UnknownRail(_))));
        let backwards = "[[faults]]\nrail = \"a0\"\neffect = \"down\"\nstart_ms = 5\nend_ms = 1\n";
        assert!(matches!(FaultSchedule::parse(backwards, &g), Err(FaultError::BadInterval(_))));
    }
}
