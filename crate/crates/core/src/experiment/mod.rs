//! Config-driven runs and their on-disk artifacts.
//!
//! A run directory holds `resolved-config.toml`, `metrics.csv`,
//! `summary.json`, one checkpoint per seed under `checkpoints/`, and, when a
//! predictor was meta-trained, `meta-metrics.csv`, `snapshots/` and
//! `histograms.csv`.

pub mod checkpoint;
pub mod config;
pub mod report;
mod run;

pub use checkpoint::{load_task, save_task, Checkpoint, Record};
pub use config::{DataSource, ExperimentConfig, ExperimentKind, Protocol, Scale, DATA_ROOT_ENV};
pub use report::{emit_histogram_series, render_summary, summarize, MetricsRecord, Summary};
pub use run::{
    build_seed_tasks, checkpoint_path, checkpoint_theta, classifier_dims, config_digest, exit_code, initial_classifier,
    inspect_checkpoint, load_source, predictor_dims, run_config, run_experiment, run_seed, train_predictor,
    SeedOutput, SeedTasks, TrainedPredictor,
};
