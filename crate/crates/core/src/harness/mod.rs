//! Synthetic benchmark, training, evaluation and sweeps.

mod config;
mod data;
mod io;
mod sweep;
mod train;

pub use config::ExperimentConfig;
pub use data::{class_means, gen_dataset, Dataset, SynthConfig};
pub use io::{ReliabilityMaps, SavedModel};
pub use sweep::{
    parse_list, parse_mr_grid, parse_seeds, run_cell, sweep, sweep_with, CellSummary, RunRecord, Stat, SweepGrid,
    SweepResult, CSV_HEADER,
};
pub use train::{
    derive_seed, epoch_inputs, evaluate, mean_reliability, reliability_gap, test_policy, test_schedule, train,
    Metrics, TrainOutcome, TrainSpec,
};
