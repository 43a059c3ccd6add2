//! Multi-rail transfer engine: transport backends, worker runtime, telemetry
//! and the benchmark driver.

pub mod backend;
pub mod bench;
pub mod clock;
pub mod config;
pub mod faults;
pub mod engine;
pub mod memory;
pub mod ring;
pub mod segments;
pub mod telemetry;
