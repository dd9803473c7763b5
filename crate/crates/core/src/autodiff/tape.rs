use std::collections::{BTreeMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};

use super::ledger::{MemoryLedger, Segment};
use super::ops::{self, Array, Broadcast};
use super::AutodiffError;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_tape_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a [`Tape`].
///
/// Handles are only meaningful on the tape that issued them; a tape reset
/// invalidates every handle issued before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tensor {
    tape: u64,
    index: usize,
}

impl Tensor {
    pub fn node_id(&self) -> usize {
        self.index
    }
}

/// The nine recordable op kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    /// `(N×K)·(K×M) → N×M`; with `transpose_rhs` the right operand is `M×K`.
    MatMul { transpose_rhs: bool },
    /// Same shape, a `1×M` row bias, or a single-element scalar on the right.
    Add,
    /// Same shape, an `N×1` column of row scales, or a single-element scalar on the right.
    Mul,
    Relu,
    /// Row-wise softmax of a 2-D tensor.
    SoftmaxRows,
    /// Inputs `[x (N×D), scale (1×D), shift (1×D)]`.
    LayerNorm,
    /// Inputs `[x (N×C_in), kernel (3·C_in×C_out), bias (1×C_out)]`, kernel-3 along the
    /// token axis with one row of zero padding on each end.
    Conv1dK3,
    /// Mean over the token axis, `N×D → 1×D`.
    Gap,
    /// Inputs `[a, b]` or `[a, b, w (N×1)]`; `Σ_i w_i Σ_j (a_ij − b_ij)²` as shape `[1]`.
    /// Row weights are constants.
    MseLike,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul { .. } => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm => "layernorm",
            OpKind::Conv1dK3 => "conv1d_k3",
            OpKind::Gap => "gap",
            OpKind::MseLike => "mse_like",
        }
    }

    fn arity(self) -> &'static [usize] {
        match self {
            OpKind::MatMul { .. } | OpKind::Add | OpKind::Mul => &[2],
            OpKind::Relu | OpKind::SoftmaxRows | OpKind::Gap => &[1],
            OpKind::LayerNorm | OpKind::Conv1dK3 => &[3],
            OpKind::MseLike => &[2, 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LeafKind {
    /// Model parameter (trainable or frozen). Referencing it costs no extra memory.
    Param,
    /// Input data, detached features and other constants.
    Data,
}

/// Buffers an op keeps for its backward rule. Node references point at values
/// already on the tape; owned arrays are derivative buffers created by the op.
enum Saved {
    Nothing,
    Operands { lhs: Option<usize>, rhs: Option<usize> },
    Relu { mask: Array },
    Softmax { output: usize },
    LayerNorm { normalized: Array, rstd: Array, gamma: usize },
    Conv { input: Option<usize>, kernel: Option<usize> },
    Mse { residual: Array, weights: Option<usize> },
}

enum NodeKind {
    Leaf(LeafKind),
    Op { kind: OpKind, inputs: Vec<usize>, broadcast: Broadcast },
}

struct Node {
    value: Rc<Array>,
    kind: NodeKind,
    requires_grad: bool,
    needs_grad: bool,
    segment: Segment,
    saved: Saved,
}

/// Gradients of the loss with respect to every reachable `requires_grad` leaf.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<Tensor, Array>,
}

impl GradientMap {
    pub fn get(&self, leaf: &Tensor) -> Option<&Array> {
        self.grads.get(leaf)
    }

    pub fn contains(&self, leaf: &Tensor) -> bool {
        self.grads.contains_key(leaf)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tensor, &Array)> {
        self.grads.iter()
    }

    pub fn remove(&mut self, leaf: &Tensor) -> Option<Array> {
        self.grads.remove(leaf)
    }
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// The tape is a single-owner object: one forward and one backward per
/// recording, then [`Tape::reset`] before reuse.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    segment: Segment,
    consumed: bool,
    flops: BTreeMap<Segment, u64>,
    detached: Vec<Rc<Array>>,
    pinned: Option<Vec<Rc<Array>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: fresh_tape_id(),
            nodes: Vec::new(),
            segment: Segment::Backbone,
            consumed: false,
            flops: BTreeMap::new(),
            detached: Vec::new(),
            pinned: None,
        }
    }

    /// Drops every recorded node and invalidates outstanding handles.
    pub fn reset(&mut self) {
        self.id = fresh_tape_id();
        self.nodes.clear();
        self.consumed = false;
        self.flops.clear();
        self.detached.clear();
        self.pinned = None;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Segment that subsequently recorded ops are attributed to.
    pub fn set_segment(&mut self, segment: Segment) {
        self.segment = segment;
    }

    pub fn segment(&self) -> Segment {
        self.segment
    }

    /// Model parameter leaf. Frozen parameters (`requires_grad == false`) act
    /// as constants but, like trainable ones, are not counted when retained.
    pub fn param(&mut self, value: Array, requires_grad: bool) -> Tensor {
        self.push_leaf(Rc::new(value), LeafKind::Param, requires_grad)
    }

    /// Constant data leaf (inputs, targets, masks).
    pub fn input(&mut self, value: Array) -> Tensor {
        self.push_leaf(Rc::new(value), LeafKind::Data, false)
    }

    /// Generic leaf; trainable leaves are treated as parameters.
    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Tensor {
        let kind = if requires_grad { LeafKind::Param } else { LeafKind::Data };
        self.push_leaf(Rc::new(value), kind, requires_grad)
    }

    /// Constant copy of `t`: gradients never flow back through the result.
    ///
    /// After [`Tape::pin_detached`], the k-th call returns the k-th pinned
    /// value instead, which must have the same shape.
    pub fn detach(&mut self, t: Tensor) -> Result<Tensor, AutodiffError> {
        let idx = self.check(t)?;
        let live = &self.nodes[idx].value;
        let value = match &self.pinned {
            Some(pins) => {
                let pin = pins.get(self.detached.len()).ok_or_else(|| {
                    AutodiffError::InvalidArgument(format!("only {} detached values pinned", pins.len()))
                })?;
                if pin.shape() != live.shape() {
                    return Err(AutodiffError::InvalidArgument(format!(
                        "pinned detached value has shape {:?}, live value {:?}",
                        pin.shape(),
                        live.shape()
                    )));
                }
                Rc::clone(pin)
            }
            None => Rc::clone(live),
        };
        self.detached.push(Rc::clone(&value));
        Ok(self.push_leaf(value, LeafKind::Data, false))
    }

    /// Values returned by every `detach` so far, in call order.
    pub fn detached_values(&self) -> Vec<Array> {
        self.detached.iter().map(|v| v.as_ref().clone()).collect()
    }

    /// Makes subsequent `detach` calls return `values` in order, so a
    /// re-recorded forward sees the same constants as an earlier one.
    pub fn pin_detached(&mut self, values: Vec<Array>) {
        self.detached.clear();
        self.pinned = Some(values.into_iter().map(Rc::new).collect());
    }

    fn push_leaf(&mut self, value: Rc<Array>, kind: LeafKind, requires_grad: bool) -> Tensor {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            kind: NodeKind::Leaf(kind),
            requires_grad,
            needs_grad: requires_grad,
            segment: self.segment,
            saved: Saved::Nothing,
        });
        Tensor { tape: self.id, index }
    }

    fn check(&self, t: Tensor) -> Result<usize, AutodiffError> {
        if t.tape != self.id || t.index >= self.nodes.len() {
            return Err(AutodiffError::ForeignTensor);
        }
        Ok(t.index)
    }

    pub fn value(&self, t: Tensor) -> Result<&Array, AutodiffError> {
        let idx = self.check(t)?;
        Ok(self.nodes[idx].value.as_ref())
    }

    pub fn shape(&self, t: Tensor) -> Result<&[usize], AutodiffError> {
        Ok(self.value(t)?.shape())
    }

    pub fn requires_grad(&self, t: Tensor) -> Result<bool, AutodiffError> {
        let idx = self.check(t)?;
        Ok(self.nodes[idx].requires_grad)
    }

    /// Whether a gradient would flow into `t` from a loss built on top of it.
    pub fn needs_grad(&self, t: Tensor) -> Result<bool, AutodiffError> {
        let idx = self.check(t)?;
        Ok(self.nodes[idx].needs_grad)
    }

    pub fn scalar(&self, t: Tensor) -> Result<f64, AutodiffError> {
        let v = self.value(t)?;
        if v.len() != 1 {
            return Err(AutodiffError::NonScalar { shape: v.shape().to_vec() });
        }
        Ok(v.iter().next().copied().unwrap_or_default())
    }

    /// Multiply-add FLOPs of recorded matmul/conv ops, by segment.
    pub fn flops(&self) -> &BTreeMap<Segment, u64> {
        &self.flops
    }

    pub fn total_flops(&self) -> u64 {
        self.flops.values().sum()
    }

    /// Records one op. Shape rules are documented on [`OpKind`].
    pub fn record(&mut self, kind: OpKind, inputs: &[Tensor]) -> Result<Tensor, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        if !kind.arity().contains(&inputs.len()) {
            return Err(AutodiffError::Arity { op: kind.name(), got: inputs.len() });
        }
        let ids = inputs.iter().map(|&t| self.check(t)).collect::<Result<Vec<_>, _>>()?;
        let needs: Vec<bool> = ids.iter().map(|&i| self.nodes[i].needs_grad).collect();
        let out_needs = needs.iter().any(|&n| n);
        let val = |i: usize| self.nodes[ids[i]].value.as_ref();
        let mut broadcast = Broadcast::Same;
        let mut flops = 0u64;

        let (value, saved) = match kind {
            OpKind::MatMul { transpose_rhs } => {
                let out = ops::matmul(val(0), val(1), transpose_rhs)?;
                flops = ops::matmul_flops(val(0), &out);
                let saved = Saved::Operands {
                    lhs: needs[1].then_some(ids[0]),
                    rhs: needs[0].then_some(ids[1]),
                };
                (out, saved)
            }
            OpKind::Add => {
                broadcast = ops::add_broadcast(val(0), val(1))?;
                (val(0) + val(1), Saved::Nothing)
            }
            OpKind::Mul => {
                broadcast = ops::mul_broadcast(val(0), val(1))?;
                let saved = Saved::Operands {
                    lhs: needs[1].then_some(ids[0]),
                    rhs: needs[0].then_some(ids[1]),
                };
                (val(0) * val(1), saved)
            }
            OpKind::Relu => {
                let (y, mask) = ops::relu(val(0));
                (y, Saved::Relu { mask })
            }
            OpKind::SoftmaxRows => {
                let y = ops::softmax_rows(val(0))?;
                (y, Saved::Softmax { output: self.nodes.len() })
            }
            OpKind::LayerNorm => {
                let out = ops::layernorm(val(0), val(1), val(2))?;
                let saved = if needs[0] || needs[1] {
                    Saved::LayerNorm { normalized: out.normalized, rstd: out.rstd, gamma: ids[1] }
                } else {
                    Saved::Nothing
                };
                (out.y, saved)
            }
            OpKind::Conv1dK3 => {
                let y = ops::conv1d_k3(val(0), val(1), val(2))?;
                flops = ops::conv1d_k3_flops(val(0), val(1));
                let saved = Saved::Conv {
                    input: needs[1].then_some(ids[0]),
                    kernel: needs[0].then_some(ids[1]),
                };
                (y, saved)
            }
            OpKind::Gap => (ops::gap(val(0))?, Saved::Nothing),
            OpKind::MseLike => {
                if ids.len() == 3 && needs[2] {
                    return Err(AutodiffError::InvalidArgument(
                        "mse_like row weights must be constants".into(),
                    ));
                }
                let weights = (ids.len() == 3).then(|| val(2));
                let (residual, total) = ops::mse_like(val(0), val(1), weights)?;
                let saved = Saved::Mse { residual, weights: (ids.len() == 3).then(|| ids[2]) };
                (ArrayD::from_elem(IxDyn(&[1]), total), saved)
            }
        };

        if flops > 0 {
            *self.flops.entry(self.segment).or_default() += flops;
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            value: Rc::new(value),
            kind: NodeKind::Op { kind, inputs: ids, broadcast },
            requires_grad: false,
            needs_grad: out_needs,
            segment: self.segment,
            saved: if out_needs { saved } else { Saved::Nothing },
        });
        Ok(Tensor { tape: self.id, index })
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
        self.record(OpKind::MatMul { transpose_rhs: false }, &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
        self.record(OpKind::MatMul { transpose_rhs: true }, &[a, b])
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
        self.record(OpKind::Mul, &[a, b])
    }

    pub fn relu(&mut self, x: Tensor) -> Result<Tensor, AutodiffError> {
        self.record(OpKind::Relu, &[x])
    }

    pub fn softmax_rows(&mut self, x: Tensor) -> Result<Tensor, AutodiffError> {
        self.record(OpKind::SoftmaxRows, &[x])
    }

    pub fn layernorm(&mut self, x: Tensor, scale: Tensor, shift: Tensor) -> Result<Tensor, AutodiffError> {
        self.record(OpKind::LayerNorm, &[x, scale, shift])
    }

    pub fn conv1d_k3(&mut self, x: Tensor, kernel: Tensor, bias: Tensor) -> Result<Tensor, AutodiffError> {
        self.record(OpKind::Conv1dK3, &[x, kernel, bias])
    }

    pub fn gap(&mut self, x: Tensor) -> Result<Tensor, AutodiffError> {
        self.record(OpKind::Gap, &[x])
    }

    pub fn mse_like(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, AutodiffError> {
        self.record(OpKind::MseLike, &[a, b])
    }

    pub fn mse_like_weighted(&mut self, a: Tensor, b: Tensor, row_weights: Tensor) -> Result<Tensor, AutodiffError> {
        self.record(OpKind::MseLike, &[a, b, row_weights])
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Tensor, factor: f64) -> Result<Tensor, AutodiffError> {
        let c = self.input(ArrayD::from_elem(IxDyn(&[1]), factor));
        self.mul(a, c)
    }

    /// Counts the scalars currently retained for the reverse pass.
    pub fn ledger_snapshot(&self) -> MemoryLedger {
        let mut ledger = MemoryLedger::default();
        let mut counted: HashSet<usize> = HashSet::new();
        // node references count once, and never for parameters
        let mut reference = |node: Option<usize>, nodes: &[Node]| -> usize {
            match node {
                Some(i) if !matches!(nodes[i].kind, NodeKind::Leaf(LeafKind::Param)) && counted.insert(i) => {
                    nodes[i].value.len()
                }
                _ => 0,
            }
        };
        for node in &self.nodes {
            let (acts, derivs) = match &node.saved {
                Saved::Nothing => (0, 0),
                Saved::Operands { lhs, rhs } => (reference(*lhs, &self.nodes) + reference(*rhs, &self.nodes), 0),
                Saved::Relu { mask } => (0, mask.len()),
                Saved::Softmax { output } => (0, reference(Some(*output), &self.nodes)),
                Saved::LayerNorm { normalized, rstd, gamma } => {
                    (reference(Some(*gamma), &self.nodes), normalized.len() + rstd.len())
                }
                Saved::Conv { input, kernel } => {
                    (reference(*input, &self.nodes) + reference(*kernel, &self.nodes), 0)
                }
                Saved::Mse { residual, weights } => (residual.len() + reference(*weights, &self.nodes), 0),
            };
            if acts + derivs > 0 {
                ledger.record(node.segment, acts, derivs);
            }
        }
        ledger
    }

    /// Reverse pass from a single-element `loss` of shape `[]` or `[1]`.
    ///
    /// Afterwards every saved buffer is released and the tape refuses further
    /// recording or a second backward until [`Tape::reset`].
    pub fn backward(&mut self, loss: Tensor) -> Result<GradientMap, AutodiffError> {
        let root = self.check(loss)?;
        if self.consumed {
            return Err(AutodiffError::BackwardTwice);
        }
        let shape = self.nodes[root].value.shape();
        if !(shape.is_empty() || shape == [1]) {
            return Err(AutodiffError::NonScalar { shape: shape.to_vec() });
        }
        let mut grads: Vec<Option<Array>> = vec![None; root + 1];
        if self.nodes[root].needs_grad {
            grads[root] = Some(ArrayD::from_elem(self.nodes[root].value.raw_dim(), 1.0));
        }

        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.kind {
                NodeKind::Leaf(_) => {
                    grads[idx] = Some(g);
                }
                NodeKind::Op { kind, inputs, broadcast } => {
                    let contributions = self.backward_op(*kind, inputs, *broadcast, &node.saved, &g);
                    for (input, contribution) in inputs.iter().zip(contributions) {
                        if let Some(c) = contribution {
                            match &mut grads[*input] {
                                Some(acc) => *acc += &c,
                                slot @ None => *slot = Some(c),
                            }
                        }
                    }
                }
            }
        }

        let mut out = GradientMap::default();
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[idx].requires_grad {
                    out.grads.insert(Tensor { tape: self.id, index: idx }, g);
                }
            }
        }
        for node in &mut self.nodes {
            node.saved = Saved::Nothing;
        }
        self.consumed = true;
        Ok(out)
    }

    fn saved_value(&self, node: Option<usize>) -> &Array {
        self.nodes[node.expect("backward rule needs a buffer that was not saved")].value.as_ref()
    }

    fn backward_op(
        &self,
        kind: OpKind,
        inputs: &[usize],
        broadcast: Broadcast,
        saved: &Saved,
        g: &Array,
    ) -> Vec<Option<Array>> {
        let needs = |i: usize| self.nodes[inputs[i]].needs_grad;
        let shape = |i: usize| self.nodes[inputs[i]].value.shape().to_vec();
        match (kind, saved) {
            (OpKind::MatMul { transpose_rhs }, Saved::Operands { lhs, rhs }) => {
                let da = needs(0).then(|| {
                    let b = self.saved_value(*rhs);
                    // dA = G·Bᵀ, or G·B when the forward used Bᵀ
                    ops::matmul(g, b, !transpose_rhs).expect("matmul backward shapes")
                });
                let db = needs(1).then(|| {
                    let a = self.saved_value(*lhs);
                    let a2 = ops::as_2d("matmul", a).expect("2-D");
                    let g2 = ops::as_2d("matmul", g).expect("2-D");
                    if transpose_rhs {
                        g2.t().dot(&a2).into_dyn()
                    } else {
                        a2.t().dot(&g2).into_dyn()
                    }
                });
                vec![da, db]
            }
            (OpKind::Add, _) => {
                let da = needs(0).then(|| g.clone());
                let db = needs(1).then(|| ops::reduce_to(g.clone(), &shape(1), broadcast));
                vec![da, db]
            }
            (OpKind::Mul, Saved::Operands { lhs, rhs }) => {
                let da = needs(0).then(|| g * self.saved_value(*rhs));
                let db = needs(1).then(|| {
                    let prod = g * self.saved_value(*lhs);
                    ops::reduce_to(prod, &shape(1), broadcast)
                });
                vec![da, db]
            }
            (OpKind::Relu, Saved::Relu { mask }) => vec![Some(g * mask)],
            (OpKind::SoftmaxRows, Saved::Softmax { output }) => {
                vec![Some(ops::softmax_rows_backward(self.saved_value(Some(*output)), g))]
            }
            (OpKind::LayerNorm, Saved::LayerNorm { normalized, rstd, gamma }) => {
                let dx = needs(0).then(|| {
                    ops::layernorm_backward_input(g, self.saved_value(Some(*gamma)), normalized, rstd)
                });
                let dgamma = needs(1).then(|| ops::reduce_to(g * normalized, &shape(1), Broadcast::Row));
                let dbeta = needs(2).then(|| ops::reduce_to(g.clone(), &shape(2), Broadcast::Row));
                vec![dx, dgamma, dbeta]
            }
            (OpKind::LayerNorm, Saved::Nothing) => {
                // only the shift needs a gradient
                let dbeta = needs(2).then(|| ops::reduce_to(g.clone(), &shape(2), Broadcast::Row));
                vec![None, None, dbeta]
            }
            (OpKind::Conv1dK3, Saved::Conv { input, kernel }) => {
                let dx = needs(0).then(|| ops::conv1d_k3_backward_input(g, self.saved_value(*kernel)));
                let dk = needs(1).then(|| ops::conv1d_k3_backward_kernel(g, self.saved_value(*input)));
                let db = needs(2).then(|| ops::reduce_to(g.clone(), &shape(2), Broadcast::Row));
                vec![dx, dk, db]
            }
            (OpKind::Gap, _) => vec![Some(ops::gap_backward(g, shape(0)[0]))],
            (OpKind::MseLike, Saved::Mse { residual, weights }) => {
                let upstream = g.iter().next().copied().unwrap_or_default();
                let w = weights.map(|w| self.nodes[w].value.as_ref());
                let da = ops::mse_like_backward(residual, w, upstream);
                let db = needs(1).then(|| -&da);
                let mut out = vec![needs(0).then_some(da), db];
                if inputs.len() == 3 {
                    out.push(None);
                }
                out
            }
            (kind, _) => unreachable!("no saved buffers for {} on a gradient path", kind.name()),
        }
    }
}
