//! Config-driven experiment runs, sweeps and ablations, and their reports.

mod config;
mod report;
mod run;

pub use config::{DataConfig, ExperimentConfig, ModelConfig, OptimBlocks, Pipeline, OUTPUT_ROOT_ENV};
pub use report::{emit_report, mean_sd, read_csv, round4, Aggregate, Format, Row, RunReport, Section, Timing};
pub use run::{ablation_suite, dedupe_ranks, rank_sweep, run, ABLATION_CELLS};
