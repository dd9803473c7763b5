//! Configuration, synthetic tasks, the pretrain → fine-tune → evaluate
//! pipeline, ablation sweeps and result files.

mod config;
mod gradcheck;
mod persist;
mod pipeline;
mod task;

pub use config::{fmt_f64, ConfigError, DistillSettings, LayerSubset, Origin, PretrainSettings, TaskSettings, TrainConfig, TrainSettings};
pub use gradcheck::{grad_check_spec, objective_grad_check, op_grad_checks, OpCheck};
pub use persist::{output_paths, persist, read_records, read_summary, write_ndjson, write_summary, SummaryRow};
pub use pipeline::{
    ablate, class_balance, eval_backbone_on, finetune, finetune_models, mode_warnings, pretrain, source_task, sweep_configs, target_task,
    EvalPoint, PretrainOutcome, PretrainRecord, RunRecord, Sweep, SWEEPABLE,
};
pub use task::{make_target_task, make_task, nearest_centroid_accuracy, SyntheticTask};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::memory::MemoryError;
use crate::model::ModelError;
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Setup(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("convergence failure: {0}")]
    Convergence(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl HarnessError {
    /// 2 for configuration problems, 3 for convergence failures, 4 for I/O, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(ConfigError::Io { .. }) => 4,
            HarnessError::Config(_) | HarnessError::Setup(_) => 2,
            HarnessError::Convergence(_) | HarnessError::Train(TrainError::Diverged(_)) => 3,
            HarnessError::Io { .. } => 4,
            HarnessError::Model(ModelError::Io { .. } | ModelError::Checkpoint(_)) => 4,
            _ => 1,
        }
    }
}
