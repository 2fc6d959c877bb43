//! Experiment configuration, the run driver and its on-disk artifacts.
//!
//! A run directory holds `config.txt`, `metrics.csv` (one row per round, flushed as
//! rounds finish), `gamma_hist.csv`, `summary.json` and the final `model.fwm`.

mod checkpoint;
mod compare;
mod config;
mod run;

pub use checkpoint::{model_from_tensors, read_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use compare::{compare, read_metrics, write_comparison, Comparison, RunMetrics, BYTES_COMPARE_FILE, MAP_COMPARE_FILE};
pub use config::ExperimentConfig;
pub use run::{
    gamma_histogram, generate_splits, load_datasets, output_dir, run_experiment, run_experiment_with, GammaHistogram,
    RunSummary, CONFIG_FILE, GAMMA_FILE, METRICS_FILE, MODEL_FILE, OUT_ROOT_ENV, SUMMARY_FILE,
};
