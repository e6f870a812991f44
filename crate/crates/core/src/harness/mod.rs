//! Experiment configuration, orchestration and report emission.

pub mod config;
pub mod optimality;
pub mod properties;
pub mod report;
pub mod scaling;
pub mod table1;

pub use config::{ExperimentConfig, ExperimentKind, OptimalityConfig, ScalingConfig};
pub use optimality::run_optimality_suite;
pub use properties::run_properties;
pub use report::{config_header, Check, Report, Table};
pub use scaling::run_scaling_suite;
pub use table1::run_table1;

use crate::error::Result;

/// Runs the experiment named in the config.
pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    match cfg.experiment {
        ExperimentKind::Table1 => run_table1(cfg),
        ExperimentKind::Scaling => run_scaling_suite(cfg),
        ExperimentKind::Optimality => run_optimality_suite(cfg),
        ExperimentKind::Properties => run_properties(cfg),
    }
}
