//! Configuration, data ingestion and the experiment runner.

pub mod config;
pub mod data;
pub mod runner;

pub use config::{ExperimentConfig, SyntheticSpec};
pub use data::{generate_synthetic, generate_synthetic_full, load_dataset_csv, write_dataset_csv};
pub use runner::{
    final_summary, prepare, prepare_all, train_oracle, run_experiment, run_prepared, run_to_dir, run_with, sweep_alpha,
    sweep_alpha_to_dir, sweep_alpha_with, write_outputs, write_results, FinalSummary, Prepared, RunOutput,
    SweepRow,
};
