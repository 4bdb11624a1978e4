//! Configuration, end-to-end training and repeated-transmission evaluation.

mod config;
mod evaluate;
mod schedule;
mod trainer;

use std::path::PathBuf;

pub use config::{
    AttackSection, DataSection, EncryptionKind, EvaluationSection, ExperimentConfig, FeatureSection,
    ModelSection, RunSection, TrainingSection,
};
pub use evaluate::{
    evaluate, fmt_num, EvalOptions, MetricRow, MetricTable, SummaryRow, METRIC_HEADER, SUMMARY_HEADER,
};
pub use schedule::Plateau;
pub use trainer::{
    build_graph, channel_noise, checkpoint_dir, checkpoint_meta, fit, log_csv, sample_snrs, EpochLog,
    FitOptions, FitOutcome, Graph, StepReport, Trainer,
};

use djescc_autograd::ParamError;

use crate::imagedata::DataError;
use crate::models::ModelError;
use crate::objective::{LossBreakdown, ObjectiveError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint was written for config {expected}, current config is {found}; refusing to resume")]
    HashMismatch { expected: String, found: String },
    #[error("non-finite loss {loss:?} at snr {snrs_db:?}{}", dump.as_ref().map(|d| format!(", batch dumped to {}", d.display())).unwrap_or_default())]
    NonFinite {
        snrs_db: Vec<f64>,
        loss: LossBreakdown,
        dump: Option<PathBuf>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Data(#[from] DataError),
}
