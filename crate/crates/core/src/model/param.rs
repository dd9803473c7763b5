use std::collections::HashMap;

use ndarray::{Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Array, Tape, Tensor};

/// Role of a parameter; decides weight decay and freeze membership.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    Gate,
    MaskToken,
}

impl ParamKind {
    /// Decoupled weight decay applies to weight matrices only.
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }

    pub fn is_norm(self) -> bool {
        matches!(self, ParamKind::NormScale | ParamKind::NormShift)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array,
    pub kind: ParamKind,
    pub requires_grad: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array, kind: ParamKind) -> Self {
        Param { name: name.into(), value, kind, requires_grad: true }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Seeded parameter factory: uniform(±1/√fan_in) weights, zero biases,
/// unit/zero layernorm affine.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn weight(&mut self, name: impl Into<String>, rows: usize, cols: usize, fan_in: usize) -> Param {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| self.rng.random_range(-bound..bound));
        Param::new(name, value.into_dyn(), ParamKind::Weight)
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize, kind: ParamKind) -> Param {
        Param::new(name, Array2::<f64>::zeros((rows, cols)).into_dyn(), kind)
    }

    pub fn ones(name: impl Into<String>, rows: usize, cols: usize, kind: ParamKind) -> Param {
        Param::new(name, Array2::<f64>::ones((rows, cols)).into_dyn(), kind)
    }
}

/// Supplies the tape tensor standing for each parameter during a forward pass.
pub trait ParamBinder {
    fn bind(&mut self, tape: &mut Tape, param: &Param) -> Tensor;
}

/// Registers every parameter as a fresh leaf honouring its `requires_grad`
/// flag and remembers which leaf belongs to which name.
#[derive(Default)]
pub struct LeafBinder {
    bound: Vec<(String, Tensor)>,
}

impl LeafBinder {
    pub fn new() -> Self {
        Self::default()
    }

    /// `(name, leaf)` for every parameter bound as trainable.
    pub fn trainable(&self) -> &[(String, Tensor)] {
        &self.bound
    }
}

impl ParamBinder for LeafBinder {
    fn bind(&mut self, tape: &mut Tape, param: &Param) -> Tensor {
        let t = tape.param(param.value.clone(), param.requires_grad);
        if param.requires_grad {
            self.bound.push((param.name.clone(), t));
        }
        t
    }
}

/// Binds every parameter as a constant; nothing is retained for backward.
pub struct ConstBinder;

impl ParamBinder for ConstBinder {
    fn bind(&mut self, tape: &mut Tape, param: &Param) -> Tensor {
        tape.param(param.value.clone(), false)
    }
}

/// Uses caller-provided leaves for the named parameters and constants for the
/// rest. Lets a whole model be driven by externally created leaves.
pub struct MapBinder {
    leaves: HashMap<String, Tensor>,
}

impl MapBinder {
    pub fn new(leaves: HashMap<String, Tensor>) -> Self {
        MapBinder { leaves }
    }
}

impl ParamBinder for MapBinder {
    fn bind(&mut self, tape: &mut Tape, param: &Param) -> Tensor {
        match self.leaves.get(&param.name) {
            Some(t) => *t,
            None => tape.param(param.value.clone(), false),
        }
    }
}

/// SHA-256 over names, shapes and exact f64 bit patterns.
pub fn params_digest<'a>(params: impl IntoIterator<Item = &'a Param>) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update((p.name.len() as u64).to_le_bytes());
        h.update(p.name.as_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.value.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub(crate) fn scalar_param(name: impl Into<String>, value: f64, kind: ParamKind) -> Param {
    Param::new(name, ArrayD::from_elem(ndarray::IxDyn(&[1, 1]), value), kind)
}
