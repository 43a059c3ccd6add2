//! TOML documents: fabric topology and engine configuration.
//!
//! ```toml
//! topology = "fabrics/uniform8.toml"   # relative to this file
//! faults = "fabrics/rail-flap.toml"  # optional, sim backends only
//! workers = 2
//! policy = "telemetry"
//! clock = "virtual"
//!
//! [scheduler]
//! min_slice_bytes = 65536
//!
//! [health]
//! probe_interval_ms = 1000
//!
//! [[backends]]
//! kind = "sim"
//! rails = "nic"
//! ```

use std::path::{Path, PathBuf};

use railspray_core::resilience::{HealthConfig, RetryPolicy};
use railspray_core::scheduler::{ConfigError, Policy, SchedulerConfig};
use railspray_core::staging::StagingConfig;
use railspray_core::topology::{RailKind, TopologyError, TopologyGraph, TopologySpec};
use serde::{Deserialize, Serialize};

use crate::backend::BackendConfig;
use crate::faults::{FaultError, FaultSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Discrete-event time driven by the engine; sim backends only.
    #[default]
    Virtual,
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub topology: Option<PathBuf>,
    pub faults: Option<PathBuf>,
    /// Zero means one worker per rail.
    pub workers: usize,
    pub policy: Policy,
    pub clock: ClockMode,
    pub ring_capacity: usize,
    /// Slices taken from a ring or polled from a rail per worker iteration.
    pub burst: usize,
    pub telemetry_window_ms: u64,
    pub stats: bool,
    pub scheduler: SchedulerConfig,
    pub health: HealthConfig,
    pub retry: RetryPolicy,
    pub staging: StagingConfig,
    pub backends: Vec<BackendConfig>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            topology: None,
            faults: None,
            workers: 0,
            policy: Policy::Telemetry,
            clock: ClockMode::Virtual,
            ring_capacity: 8192,
            burst: 32,
            telemetry_window_ms: 10,
            stats: true,
            scheduler: SchedulerConfig::default(),
            health: HealthConfig::default(),
            retry: RetryPolicy::default(),
            staging: StagingConfig::default(),
            backends: default_sim_backends(),
        }
    }
}

/// Simulated NIC and intra-node rails plus file IO.
pub fn default_sim_backends() -> Vec<BackendConfig> {
    vec![
        sim_backend(RailKind::Nic),
        sim_backend(RailKind::Intra),
        BackendConfig::File,
    ]
}

/// Loopback TCP between nodes, direct copies within a node, file IO.
pub fn default_real_backends() -> Vec<BackendConfig> {
    vec![
        BackendConfig::Memcpy { media: None },
        BackendConfig::Tcp {
            media: None,
            intra_node: true,
        },
        BackendConfig::File,
    ]
}

pub fn sim_backend(rails: RailKind) -> BackendConfig {
    BackendConfig::Sim {
        rails,
        media: None,
        window: 64,
        seed: 0,
        intra_node: None,
        name: None,
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigLoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Faults(#[from] FaultError),
    #[error(transparent)]
    Invalid(#[from] ConfigError),
    #[error("invalid engine setting: {0}")]
    Setting(String),
    #[error("engine config names no topology file")]
    MissingTopology,
}

fn read(path: &Path) -> Result<String, ConfigLoadError> {
    std::fs::read_to_string(path).map_err(|source| ConfigLoadError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_topology(text: &str) -> Result<TopologySpec, toml::de::Error> {
    toml::from_str(text)
}

pub fn load_topology(path: &Path) -> Result<TopologyGraph, ConfigLoadError> {
    let spec = parse_topology(&read(path)?).map_err(|source| ConfigLoadError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(TopologyGraph::from_spec(&spec)?)
}

pub fn load_faults(path: &Path, graph: &TopologyGraph) -> Result<FaultSchedule, ConfigLoadError> {
    Ok(FaultSchedule::parse(&read(path)?, graph)?)
}

impl EngineConfig {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn validate(&self) -> Result<(), ConfigLoadError> {
        self.scheduler.validate()?;
        self.health.validate()?;
        if self.retry.max_attempts == 0 || self.retry.max_attempts > 255 {
            return Err(ConfigLoadError::Setting("retry.max_attempts must be in 1..=255".into()));
        }
        if self.retry.attempt_timeout_ms == Some(0) {
            return Err(ConfigLoadError::Setting("retry.attempt_timeout_ms must be positive".into()));
        }
        if self.staging.chunk_bytes == 0
            || self.staging.ring_depth == 0
            || self.staging.pool_bytes < self.staging.chunk_bytes
        {
            return Err(ConfigLoadError::Setting("staging pool must hold at least one chunk".into()));
        }
        if self.ring_capacity == 0 || self.burst == 0 || self.telemetry_window_ms == 0 {
            return Err(ConfigLoadError::Setting(
                "ring_capacity, burst and telemetry_window_ms must be positive".into(),
            ));
        }
        let has_sim = self.backends.iter().any(|b| matches!(b, BackendConfig::Sim { .. }));
        let has_real = self.backends.iter().any(|b| {
            matches!(b, BackendConfig::Tcp { .. } | BackendConfig::Memcpy { .. })
        });
        match self.clock {
            ClockMode::Virtual if has_real => Err(ConfigLoadError::Setting(
                "virtual clock needs simulated backends only".into(),
            )),
            ClockMode::Real if has_sim => Err(ConfigLoadError::Setting(
                "real clock needs tcp, memcpy or file backends".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Loads an engine config plus the topology and fault schedule it names.
    /// Relative paths resolve against the config file's directory.
    pub fn load(path: &Path) -> Result<(Self, TopologyGraph, FaultSchedule), ConfigLoadError> {
        let mut cfg = Self::parse(&read(path)?).map_err(|source| ConfigLoadError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let topo = base.join(cfg.topology.as_ref().ok_or(ConfigLoadError::MissingTopology)?);
        let graph = load_topology(&topo)?;
        let faults = match &cfg.faults {
            Some(f) => load_faults(&base.join(f), &graph)?,
            None => FaultSchedule::empty(),
        };
        cfg.topology = Some(topo);
        cfg.validate()?;
        Ok((cfg, graph, faults))
    }
}
