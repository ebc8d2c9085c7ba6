//! Power-monitoring pipeline for a low-voltage switchboard: a simulated
//! Modbus RTU power analyser, a polling gateway, a crash-safe sample store
//! and an authenticated JSON API.

pub mod modbus;
pub mod registers;
pub mod sample;
pub mod sim;
pub mod transport;
pub mod store;
pub mod gateway;
pub mod api;
pub mod config;
pub mod pipeline;
