//! Experiment runner for the fairness regularizers: λ-sweeps over the
//! discrete and continuous pipelines, tradeoff-curve CSVs, and the few-shot
//! adaptation experiment.

pub mod config;
pub mod format;
pub mod sweep;

pub use config::{validate_config, ConfigErrors, DatasetId, ExperimentConfig, Pipeline};
pub use sweep::{run_few_shot, run_sweep, FewShotOutput, RunError, SweepOutput};

/// Process exit codes of the `fairhgr` binary.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const INGESTION: i32 = 2;
    pub const PARTIAL: i32 = 3;
}
