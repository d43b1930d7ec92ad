//! Experiment driver for the stagecache engine: configuration, the staged
//! pipeline, and baseline/ablation/sweep reports.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;
pub use error::HarnessError;
pub use pipeline::{execute, RunOutput};
pub use report::{ablate, compare, export_plots, run, sweep_n, RunReport};
