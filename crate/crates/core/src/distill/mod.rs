//! Feature and logits distillation between the backbone and the side network.
//!
//! The backbone teaches the side network through per-layer feature losses and
//! the side network teaches the backbone head through a logits loss. Both
//! directions run in one combined objective; stop-gradients decide who learns
//! from what.

mod generation;
mod losses;
mod mask;
mod objective;
mod projector;

pub use generation::{generate, BoundGeneration, GenerationBlock};
pub use losses::{
    loss_deep, loss_deep_node, loss_logits, loss_logits_node, loss_shallow, loss_shallow_node, task_loss_node,
};
pub use mask::{apply_mask, apply_mask_node, mask_from_uniform, sample_mask, BoundMask, MaskVector};
pub use objective::{
    build_distiller, combined_objective, objective_with_mask, BoundDistiller, DeepParts, DistillModules, LayerDistiller,
    LossBreakdown, Objective,
};
pub use projector::{bottleneck_project, projector_param_count, BottleneckProjector, BoundProjector};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::model::{ArchSpec, ModelError};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("mask ratio {0} is outside [0, 1]")]
    LambdaRange(f64),
    #[error("mask has {got} entries but the features have {expected} rows")]
    MaskLength { expected: usize, got: usize },
    #[error("{what}: expected width {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },
    #[error("{what}: shapes {lhs:?} and {rhs:?} differ")]
    ShapePair { what: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("{0}")]
    Batch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Loss weights, layer roles and distillation module shapes.
///
/// Layer indices are one-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub lambda: f64,
    pub shallow_layers: Vec<usize>,
    pub deep_layers: Vec<usize>,
    pub w_log: f64,
    pub w_deep: f64,
    pub w_sha: f64,
    pub w_sft: f64,
    /// Bottleneck rank `d` of the feature projectors.
    pub rank: usize,
    /// When off, deep layers use the direct-imitation loss instead of mask-and-generate.
    pub generation: bool,
    /// Also apply the task loss to the backbone logits.
    pub task_on_backbone: bool,
}

impl DistillConfig {
    pub fn for_spec(spec: &ArchSpec) -> Self {
        DistillConfig {
            lambda: 0.5,
            shallow_layers: spec.shallow_layers(),
            deep_layers: spec.deep_layers(),
            w_log: 1e-4,
            w_deep: 6e-5,
            w_sha: 4e-5,
            w_sft: 1.0,
            rank: 4,
            generation: true,
            task_on_backbone: false,
        }
    }

    pub fn validate(&self, spec: &ArchSpec) -> Result<(), DistillError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(DistillError::LambdaRange(self.lambda));
        }
        for (field, w) in [("distill.w_log", self.w_log), ("distill.w_deep", self.w_deep), ("distill.w_sha", self.w_sha), ("distill.w_sft", self.w_sft)] {
            if !w.is_finite() || w < 0.0 {
                return Err(DistillError::InvalidConfig { field, reason: format!("weight {w} must be finite and nonnegative") });
            }
        }
        let width = spec.side_hidden().min(spec.hidden);
        if self.rank == 0 || self.rank > width {
            return Err(DistillError::InvalidConfig {
                field: "distill.rank",
                reason: format!("rank {} must lie in 1..={width}", self.rank),
            });
        }
        let mut seen = vec![false; spec.layers];
        for &l in self.shallow_layers.iter().chain(&self.deep_layers) {
            if l == 0 || l > spec.layers {
                return Err(DistillError::InvalidConfig {
                    field: "distill.layers",
                    reason: format!("layer {l} does not exist in a {}-layer model", spec.layers),
                });
            }
            if std::mem::replace(&mut seen[l - 1], true) {
                return Err(DistillError::InvalidConfig {
                    field: "distill.layers",
                    reason: format!("layer {l} is listed twice"),
                });
            }
        }
        Ok(())
    }

    /// Keeps only the layers in `keep`, preserving their shallow/deep role.
    pub fn restrict_layers(&mut self, keep: &[usize]) {
        self.shallow_layers.retain(|l| keep.contains(l));
        self.deep_layers.retain(|l| keep.contains(l));
    }
}
