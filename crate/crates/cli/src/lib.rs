//! Experiment harness around `lifted-core`: config files, training runs,
//! proposition suites and inference traces.

pub mod commands;
pub mod config;
