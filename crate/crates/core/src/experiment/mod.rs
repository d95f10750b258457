//! Experiment runner: scenario generation, training, backfill curves and
//! CSV artifacts.

mod compare;
mod config;
mod output;
mod pipeline;
mod runner;

pub use compare::{compare, COMPARE_HEADER};
pub use config::{ExperimentConfig, Method, DESK_LR0};
pub use output::{num, write_atomic, CsvTable};
pub use pipeline::{evaluate_method, prepare_seed, train_method, Extractions, MethodRun, SeedData};
pub use runner::{
    mean_std, run, seed_dir, AggregateRow, ExperimentReport, Scope, SeedReport, AGGREGATE_HEADER,
    CURVE_HEADER, INCOMPLETE_MARKER, SUMMARY_HEADER,
};
