//! Experiment orchestration for `lpk-core`: configuration, runners and persisted outputs.

pub mod config;
pub mod persist;
pub mod run;
pub mod stats;
