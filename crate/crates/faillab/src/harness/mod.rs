//! Experiment orchestration: config parsing, method dispatch, deterministic
//! RNG streams, metric logging, checkpoints, and the CLI surface.

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod rng;
pub mod runlog;
pub mod runner;
