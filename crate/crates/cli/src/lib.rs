//! Batch front end: solve the SOS hierarchy for a configured problem, then
//! simulate, audit and compare the resulting controllers.

pub mod commands;
pub mod pipeline;
