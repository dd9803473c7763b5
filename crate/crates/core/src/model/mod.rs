//! Backbone encoder, width-reduced side network, freeze policy and checkpoints.

mod backbone;
pub mod checkpoint;
mod freeze;
mod layers;
mod param;
mod side;
mod spec;

pub use backbone::{
    backbone_forward, build_backbone, faded_forward, faded_forward_counted, BackboneModel, BackboneOutput,
    BackboneTrace, BoundBackbone,
};
pub use freeze::{apply_freeze, frozen_backbone_params, BackboneTraining, FreezePolicy};
pub use layers::{BoundEncoderLayer, BoundLinear, EncoderLayer, Linear, Norm};
pub use param::{params_digest, ConstBinder, Initializer, LeafBinder, MapBinder, Param, ParamBinder, ParamKind};
pub use side::{build_side, fuse_inputs, fuse_values, side_forward, BoundSide, SideModel, SideTrace};
pub use spec::ArchSpec;


use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture field `{field}`: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("expected {expected} tokens per example, got {got}")]
    TokenMismatch { expected: usize, got: usize },
    #[error("expected input width {expected}, got {got}")]
    InputWidth { expected: usize, got: usize },
    #[error("side network needs {expected} backbone feature maps, got {got}")]
    MissingFeatures { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Checkpoint(e.to_string())
    }
}
