//! Experiment driver library behind the `gcq` binary: configuration
//! files, suite running, curve emission and target generation.

pub mod config;
pub mod curves;
pub mod suite;
pub mod targets;
