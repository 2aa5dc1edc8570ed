//! Persistence: offline datasets, checkpoints, run configuration and the
//! cached pipeline.

mod checkpoint;
mod config;
mod dataset;
mod pipeline;
mod report;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, file_sha256, load_checkpoint, save_checkpoint, CheckpointMeta, Checkpointable,
    CHECKPOINT_VERSION,
};
pub use config::{
    content_hash, CollectConfig, ConfigError, DreamSection, EvalConfig, RunConfig, SweepConfig, VaeSection, WmSection,
};
pub use dataset::{
    load_dataset, quantize, save_dataset, split_dataset, split_episodes, DatasetSplit, TrajectoryDataset, DATASET_VERSION,
};
pub use pipeline::{eval_seed, read_json, run_pipeline, Pipeline, PipelineError, PipelineOutcome, StageRecord, ROOT_ENV};
pub use report::{
    line_plot_svg, loss_vs_depth_svg, loss_vs_iteration_svg, series_csv, EnvReport, Report, ScatterPoint, Series,
    SweepSummary,
};

use crate::env::EnvError;
use crate::vae::VaeError;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a wmlab file (bad magic)")]
    BadMagic,
    #[error("checksum mismatch: file is corrupted")]
    Checksum,
    #[error("format version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("cannot split dataset: {0}")]
    Split(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Vae(#[from] VaeError),
}
