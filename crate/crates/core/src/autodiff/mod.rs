//! Reverse-mode automatic differentiation on a recording tape.
//!
//! Every op records just the buffers its backward rule needs, split into
//! saved layer inputs (`{a}`) and saved nonlinearity derivatives (`{σ'}`), so
//! [`Tape::ledger_snapshot`] reports what a memory-frugal implementation would
//! actually retain. Buffers are only kept when a gradient can reach the op.

mod gradcheck;
mod ledger;
pub mod ops;
mod tape;

pub use gradcheck::grad_check;
pub use ledger::{MemoryLedger, Segment, SegmentCounts};
pub use ops::Array;
pub use tape::{GradientMap, OpKind, Tape, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("{op}: wrong number of inputs ({got})")]
    Arity { op: &'static str, got: usize },
    #[error("tensor does not belong to this tape")]
    ForeignTensor,
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },
    #[error("backward already ran on this tape; run a new forward pass first")]
    BackwardTwice,
    #[error("tape already consumed by backward; reset it before recording")]
    TapeConsumed,
    #[error("forward function is not deterministic ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },
    #[error("{0}")]
    InvalidArgument(String),
}
