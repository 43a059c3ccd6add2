//! Rail health tracking and per-slice retry bookkeeping.
//!
//! A rail is excluded after a run of failed completions or after sustained
//! completions far slower than predicted. Excluded rails are probed with small
//! transfers and return to service after enough consecutive probe successes.

use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::reachability::RailPair;
use crate::scheduler::ConfigError;
use crate::topology::Tier;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum HealthState {
    #[default]
    Healthy,
    Excluded,
    Probing,
}

impl HealthState {
    pub fn as_str(self) -> &'static str {
        match self {
            HealthState::Healthy => "healthy",
            HealthState::Excluded => "excluded",
            HealthState::Probing => "probing",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct HealthConfig {
    pub failure_threshold: u32,
    /// observed / predicted above this counts as a degraded completion.
    pub degradation_ratio: f64,
    /// Consecutive degraded completions that exclude a rail.
    pub degradation_window: u32,
    pub probe_successes: u32,
    pub probe_interval_ms: u64,
    pub probe_bytes: u64,
    /// Each failed probe doubles the interval, up to this many doublings.
    pub max_probe_backoff: u32,
}

impl Default for HealthConfig {
    fn default() -> Self {
        HealthConfig {
            failure_threshold: 3,
            degradation_ratio: 4.0,
            degradation_window: 8,
            probe_successes: 2,
            probe_interval_ms: 30_000,
            probe_bytes: 4096,
            max_probe_backoff: 3,
        }
    }
}

impl HealthConfig {
    /// One-second probing, used by tests and short benchmark runs.
    pub fn fast_probing() -> Self {
        HealthConfig {
            probe_interval_ms: 1_000,
            ..HealthConfig::default()
        }
    }

    pub fn probe_interval_ns(&self) -> u64 {
        self.probe_interval_ms.saturating_mul(1_000_000)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = ConfigError::Resilience;
        if self.failure_threshold == 0 {
            return Err(bad("failure_threshold"));
        }
        if !(self.degradation_ratio > 1.0) {
            return Err(bad("degradation_ratio"));
        }
        if self.degradation_window == 0 {
            return Err(bad("degradation_window"));
        }
        if self.probe_successes == 0 {
            return Err(bad("probe_successes"));
        }
        if self.probe_interval_ms == 0 {
            return Err(bad("probe_interval_ms"));
        }
        if self.probe_bytes == 0 {
            return Err(bad("probe_bytes"));
        }
        if self.max_probe_backoff > 16 {
            return Err(bad("max_probe_backoff"));
        }
        Ok(())
    }
}

/// Outcome of one completion as seen by the health tracker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Signal {
    Ok { observed: f64, predicted: f64 },
    Failed,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExclusionCause {
    Failures,
    Degraded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    Excluded(ExclusionCause),
    ProbeStarted,
    ProbeFailed,
    Reintegrated,
}

impl Transition {
    pub fn state_after(self) -> HealthState {
        match self {
            Transition::Excluded(_) | Transition::ProbeFailed => HealthState::Excluded,
            Transition::ProbeStarted => HealthState::Probing,
            Transition::Reintegrated => HealthState::Healthy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RailHealth {
    state: HealthState,
    consecutive_failures: u32,
    degraded_streak: u32,
    probe_successes: u32,
    probe_backoff: u32,
    next_probe_ns: u64,
    probe_in_flight: bool,
    /// An early probe has been spent since the exclusion.
    expedited: bool,
    /// Exclusion time or the latest failed probe.
    last_probe_ns: u64,
}

impl RailHealth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> HealthState {
        self.state
    }

    pub fn consecutive_failures(&self) -> u32 {
        self.consecutive_failures
    }

    pub fn next_probe_ns(&self) -> Option<u64> {
        (self.state == HealthState::Excluded).then_some(self.next_probe_ns)
    }

    pub fn probe_in_flight(&self) -> bool {
        self.probe_in_flight
    }

    fn exclude(&mut self, now_ns: u64, cfg: &HealthConfig, cause: ExclusionCause) -> Transition {
        self.state = HealthState::Excluded;
        self.consecutive_failures = 0;
        self.degraded_streak = 0;
        self.probe_successes = 0;
        self.probe_in_flight = false;
        self.expedited = false;
        self.last_probe_ns = now_ns;
        self.next_probe_ns = now_ns + cfg.probe_interval_ns();
        Transition::Excluded(cause)
    }

    /// Pulls the next probe forward while work waits on this rail with no
    /// healthy alternative, so a transient exclusion does not outlast the
    /// caller's stall budget. The first early probe goes out at once; later
    /// ones keep `min_gap_ns` after the previous attempt.
    pub fn expedite_probe(&mut self, now_ns: u64, min_gap_ns: u64) -> bool {
        if self.state != HealthState::Excluded {
            return false;
        }
        let target = if self.expedited {
            now_ns.max(self.last_probe_ns.saturating_add(min_gap_ns))
        } else {
            now_ns
        };
        if target >= self.next_probe_ns {
            return false;
        }
        self.expedited = true;
        self.next_probe_ns = target;
        true
    }

    /// Feeds one regular (non-probe) completion. Completions that land after
    /// the rail left the healthy state do not move it.
    pub fn observe(&mut self, signal: Signal, now_ns: u64, cfg: &HealthConfig) -> Option<Transition> {
        if self.state != HealthState::Healthy {
            return None;
        }
        match signal {
            Signal::Ok { observed, predicted } => {
                self.consecutive_failures = 0;
                if predicted > 0.0 && observed / predicted > cfg.degradation_ratio {
                    self.degraded_streak += 1;
                    if self.degraded_streak >= cfg.degradation_window {
                        return Some(self.exclude(now_ns, cfg, ExclusionCause::Degraded));
                    }
                } else {
                    self.degraded_streak = 0;
                }
                None
            }
            Signal::Failed | Signal::Timeout => {
                self.degraded_streak = 0;
                self.consecutive_failures += 1;
                if self.consecutive_failures >= cfg.failure_threshold {
                    Some(self.exclude(now_ns, cfg, ExclusionCause::Failures))
                } else {
                    None
                }
            }
        }
    }

    pub fn probe_due(&self, now_ns: u64) -> bool {
        self.state == HealthState::Excluded && !self.probe_in_flight && now_ns >= self.next_probe_ns
    }

    /// Marks a probe as issued. Only valid when [`probe_due`](Self::probe_due).
    pub fn start_probe(&mut self) -> Transition {
        debug_assert!(self.state != HealthState::Healthy);
        self.state = HealthState::Probing;
        self.probe_in_flight = true;
        Transition::ProbeStarted
    }

    /// Records a probe outcome. A success below the required count keeps the
    /// rail probing and asks for the next probe right away.
    pub fn probe_result(&mut self, ok: bool, now_ns: u64, cfg: &HealthConfig) -> Option<Transition> {
        if self.state != HealthState::Probing {
            return None;
        }
        self.probe_in_flight = false;
        if ok {
            self.probe_successes += 1;
            if self.probe_successes >= cfg.probe_successes {
                self.state = HealthState::Healthy;
                self.probe_successes = 0;
                self.probe_backoff = 0;
                self.consecutive_failures = 0;
                self.degraded_streak = 0;
                return Some(Transition::Reintegrated);
            }
            None
        } else {
            self.probe_backoff = (self.probe_backoff + 1).min(cfg.max_probe_backoff);
            self.state = HealthState::Excluded;
            self.probe_successes = 0;
            self.last_probe_ns = now_ns;
            self.next_probe_ns = now_ns + (cfg.probe_interval_ns() << self.probe_backoff);
            Some(Transition::ProbeFailed)
        }
    }

    /// No transport can carry a probe right now. Counts as a failed attempt
    /// so the next one waits for the usual interval.
    pub fn probe_unavailable(&mut self, now_ns: u64, cfg: &HealthConfig) -> Option<Transition> {
        match self.state {
            HealthState::Healthy => None,
            HealthState::Excluded => {
                self.last_probe_ns = now_ns;
                self.next_probe_ns = now_ns + (cfg.probe_interval_ns() << self.probe_backoff);
                None
            }
            HealthState::Probing => {
                self.state = HealthState::Probing;
                self.probe_in_flight = true;
                self.probe_result(false, now_ns, cfg)
            }
        }
    }

    /// Whether a probing rail wants its next probe issued now.
    pub fn wants_followup_probe(&self) -> bool {
        self.state == HealthState::Probing && !self.probe_in_flight
    }

    /// Periodic reset: forget counters and backoff, keep the state.
    pub fn clear_counters(&mut self) {
        self.consecutive_failures = 0;
        self.degraded_streak = 0;
        self.probe_backoff = 0;
    }
}

// ---------------------------------------------------------------------------
// Retries
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct RetryPolicy {
    /// Attempts per slice, the first one included.
    pub max_attempts: u32,
    /// An attempt without completion after this long counts as a timeout.
    /// Unset means the clock's default, see [`RetryPolicy::attempt_timeout_ms`].
    pub attempt_timeout_ms: Option<u64>,
    /// A slice with no healthy pair waits at most this long before failing.
    pub max_stall_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            attempt_timeout_ms: None,
            max_stall_ms: 10_000,
        }
    }
}

impl RetryPolicy {
    pub const REAL_TIMEOUT_MS: u64 = 2_000;
    /// Simulated links have no scheduling noise, so a shorter timeout is safe.
    pub const VIRTUAL_TIMEOUT_MS: u64 = 500;

    pub fn attempt_timeout_ms(&self, virtual_clock: bool) -> u64 {
        self.attempt_timeout_ms.unwrap_or(if virtual_clock {
            Self::VIRTUAL_TIMEOUT_MS
        } else {
            Self::REAL_TIMEOUT_MS
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryCandidate {
    pub pair: RailPair,
    pub tier: Tier,
    pub healthy: bool,
    pub failures: u32,
    pub queued_bytes: u64,
}

/// Attempt history of one slice.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SliceAttempts {
    attempts: u32,
    blacklist: Vec<RailPair>,
}

impl SliceAttempts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn attempts(&self) -> u32 {
        self.attempts
    }

    pub fn blacklist(&self) -> &[RailPair] {
        &self.blacklist
    }

    pub fn record_attempt(&mut self) -> u32 {
        self.attempts += 1;
        self.attempts
    }

    pub fn record_failure(&mut self, pair: RailPair) {
        if !self.blacklist.contains(&pair) {
            self.blacklist.push(pair);
        }
    }

    pub fn exhausted(&self, policy: &RetryPolicy) -> bool {
        self.attempts >= policy.max_attempts
    }

    /// Backend substitution starts the slice over on a new route.
    pub fn reset(&mut self) {
        self.attempts = 0;
        self.blacklist.clear();
    }

    /// Best healthy, not yet failed pair at or below `max_tier`: lowest tier,
    /// then fewest recent failures, then least queued, then ids.
    pub fn pick_retry(
        &self,
        candidates: impl IntoIterator<Item = RetryCandidate>,
        max_tier: Tier,
    ) -> Option<RailPair> {
        candidates
            .into_iter()
            .filter(|c| c.healthy && c.tier <= max_tier && !self.blacklist.contains(&c.pair))
            .min_by_key(|c| (c.tier, c.failures, c.queued_bytes, c.pair))
            .map(|c| c.pair)
    }
}
