//! The experiment driver: query, annotate, propagate, pseudo-label,
//! reinitialise and retrain.

mod checkpoint;
mod config;
mod dataset;
mod experiment;
mod vote;

pub use checkpoint::{checkpoint, resume};
pub use config::{DatasetSource, ExperimentConfig, Mode, Seeds, TauMode};
pub use dataset::{load_dataset_clouds, PreparedDataset, PreparedScene};
pub use experiment::{
    init_seed_for, metrics_csv, model_widths, oracle_annotate, run_experiment, Annotator, ExperimentOutcome,
    ExperimentState, IterationMetrics, Oracle, Status,
};
pub use vote::{infer_vote, pointwise, vote};
