//! Simulated single-phase power analyser acting as a Modbus RTU slave.

mod admin;
mod serve;
mod state;

pub use admin::{serve_admin, AdminCommand};
pub use serve::{serve, serve_tcp, spawn_on_bus, Control, SimHandle};
pub use state::{FaultKind, Readings, SimConfig, SimState, NORMAL_BAND, SAG_BAND};
