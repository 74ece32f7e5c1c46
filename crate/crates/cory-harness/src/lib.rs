//! Experiment harness: run configuration, metrics files, the training
//! runners, sweep grids, pass@k evaluation, and plot-data aggregation.

pub mod config;
pub mod error;
pub mod metrics;
pub mod passk;
pub mod plotdata;
pub mod pretrain;
pub mod runner;
pub mod sweeps;

pub use config::{Method, RunConfig, TaskName};
pub use error::HarnessError;
pub use metrics::{MetricsFile, MetricsRow, MetricsWriter};
pub use passk::{pass_at_k, ActionSampler};
pub use plotdata::emit_plot_data;
pub use runner::{run, AgentReport, RunReport};
pub use sweeps::{frontier_sweep, lr_sweep, SweepTable, DEFAULT_ETAS};
