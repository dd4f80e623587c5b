//! Desk-scale experiments: datasets, configuration, the training driver,
//! α sweeps and CSV metrics.

mod config;
mod data;
mod run;

pub use config::{
    DatasetSpec, ExperimentConfig, ModeSpec, NetworkSpec, OptimizerSpec, ReductionSpec,
    TrainingSpec,
};
pub use data::{
    class_mean, generate_synthetic, load_idx, Dataset, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use run::{
    alpha_label, compare_alphas, evaluate, initial_state, load_dataset, run_csv_path,
    run_experiment, run_on_dataset, Divergence, EpochMetrics, RunMetrics, SweepSummary,
};
