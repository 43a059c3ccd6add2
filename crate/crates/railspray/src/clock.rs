//! Time sources. Everything in the engine measures time in nanoseconds since
//! the clock's origin.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

pub trait Clock: Send + Sync + std::fmt::Debug {
    fn now_ns(&self) -> u64;

    /// Whether time only moves when a driver advances it.
    fn is_virtual(&self) -> bool {
        false
    }
}

#[derive(Debug)]
pub struct WallClock {
    origin: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        WallClock {
            origin: Instant::now(),
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }
}

/// Manually advanced clock for deterministic discrete-event runs.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("virtual clock cannot move backwards from {now} to {requested}")]
pub struct TimeRegression {
    pub now: u64,
    pub requested: u64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&self, t: u64) -> Result<(), TimeRegression> {
        let now = self.now.load(Ordering::Acquire);
        if t < now {
            return Err(TimeRegression { now, requested: t });
        }
        self.now.store(t, Ordering::Release);
        Ok(())
    }

    pub fn advance(&self, dt: u64) {
        self.now.fetch_add(dt, Ordering::AcqRel);
    }
}

impl Clock for VirtualClock {
    fn now_ns(&self) -> u64 {
        self.now.load(Ordering::Acquire)
    }

    fn is_virtual(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_refuses_regression() {
        let c = VirtualClock::new();
        c.set(10).unwrap();
        c.advance(5);
        assert_eq!(c.now_ns(), 15);
        assert_eq!(c.set(3), Err(TimeRegression { now: 15, requested: 3 }));
        c.set(15).unwrap();
    }

    #[test]
    fn wall_clock_moves_forward() {
        let c = WallClock::new();
        let a = c.now_ns();
        std::thread::sleep(std::time::Duration::from_millis(1));
        assert!(c.now_ns() > a);
    }
}
