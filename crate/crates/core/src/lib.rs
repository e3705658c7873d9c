//! Simulation testbed for thermostatically controlled loads.

pub mod analysis;
pub mod client;
pub mod config;
pub mod etp;
pub mod experiment;
pub mod fleet;
pub mod protocol;
pub mod schedule;
pub mod server;
pub mod switching;
pub mod telemetry;
