//! Command-line harness: data generation, pre-training, pseudo-labeling,
//! co-training, evaluation and ablation reports.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{exit_code, run_command};
