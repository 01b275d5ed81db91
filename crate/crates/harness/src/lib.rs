//! Experiment runner on top of `rpim-core`: seeded runs, ablation grids,
//! η sweeps, the weight-decay search, a k-means baseline and result files.

pub mod config;
pub mod error;
pub mod experiment;
pub mod kmeans;
pub mod output;

pub use config::{Ablation, DataSource, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use experiment::{run_ablation_suite, run_eta_sweep, run_experiment, search_weight_decay, ResultTable};

/// Environment variable holding the worker-pool size.
pub const WORKERS_ENV: &str = "RPIM_WORKERS";

/// Reads the worker-pool size from the environment; 1 when unset.
pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(HarnessError::Config(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}
