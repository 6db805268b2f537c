//! Experiment orchestration: synthetic domains, baselines, tuning, transfer
//! matrices, two-stage and distillation runs, embeddings and reports.

pub mod dataset;
pub mod domain;
pub mod embed;
pub mod matrix;
pub mod report;
pub mod run;

pub use dataset::Dataset;
pub use domain::{gen_domain, standard_classes, ClassDef, DomainSpec, Palette, SampleCounts};
pub use embed::{embeddings, export_embeddings};
pub use matrix::{default_tuning_config, transfer_matrix, Cell, ExperimentConfig, MatrixOptions, TransferMatrix};
pub use report::{band_flag, emit_report, strict_flag, Flag};
pub use run::{
    distill_experiment, mean_stdev, train_baseline, tune, two_stage, ModelShape, RunOutput, RunResult, Stage,
    TrialResult, TuneMode, DEFAULT_LR_GRID,
};
