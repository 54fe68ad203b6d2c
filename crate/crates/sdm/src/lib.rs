//! File formats, configuration, checkpoints and the operator commands around `sdm-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod logs;
pub mod scenario_file;
