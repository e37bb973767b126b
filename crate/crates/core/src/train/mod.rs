//! Optimisation, training and evaluation.

pub mod checkpoint;
mod config;
mod harness;
mod optim;
mod report;
mod run;

pub use config::Config;
pub use harness::{
    density_csv, density_harness, invariance_csv, invariance_harness, relative_diff, DensityRow, InvarianceColumn,
    Perturbation,
};
pub use optim::{apply_schedules, he_init, Adam, Schedule};
pub use report::{metrics_csv, RunReport, METRICS_HEADER};
pub use run::{
    evaluate, predict, predict_logits, softmax, vote_accuracy, vote_predict, EpochMetrics, Evaluation, TrainOptions,
    Trainer,
};
