use ndarray::{Array1, Array2, Array3, Axis, Ix2};

use crate::autodiff::{Segment, Tape, Tensor};

use super::layers::{BoundEncoderLayer, BoundLinear, EncoderLayer, Linear};
use super::param::{ConstBinder, Initializer, Param, ParamBinder};
use super::{ArchSpec, ModelError};

/// The pretrained encoder: token embedding, `L` encoder layers and the
/// GAP + linear head `W_B`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneModel {
    pub spec: ArchSpec,
    pub embed: Linear,
    pub layers: Vec<EncoderLayer>,
    pub head: Param,
}

/// Builds a backbone with deterministic initialization from `seed`.
pub fn build_backbone(spec: &ArchSpec, seed: u64) -> Result<BackboneModel, ModelError> {
    spec.validate()?;
    Ok(BackboneModel::build_unchecked(spec, seed))
}

impl BackboneModel {
    pub(crate) fn build_unchecked(spec: &ArchSpec, seed: u64) -> Self {
        let mut init = Initializer::new(seed);
        let d = spec.hidden;
        let embed = Linear::new(&mut init, "backbone.embed", spec.input_dim, d, true);
        let layers = (0..spec.layers)
            .map(|i| EncoderLayer::new(&mut init, &format!("backbone.layers.{i}"), d, spec.mlp_ratio))
            .collect();
        let head = init.weight("backbone.head.weight", d, spec.out_dim, d);
        BackboneModel { spec: spec.clone(), embed, layers, head }
    }

    /// Draws a fresh `W_B`, leaving every other parameter untouched.
    pub fn reinit_head(&mut self, seed: u64) {
        let mut init = Initializer::new(seed);
        let requires_grad = self.head.requires_grad;
        self.head = init.weight("backbone.head.weight", self.spec.hidden, self.spec.out_dim, self.spec.hidden);
        self.head.requires_grad = requires_grad;
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.embed.params();
        for l in &self.layers {
            v.extend(l.params());
        }
        v.push(&self.head);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.embed.params_mut();
        for l in &mut self.layers {
            v.extend(l.params_mut());
        }
        v.push(&mut self.head);
        v
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut dyn ParamBinder) -> BoundBackbone {
        BoundBackbone {
            spec: self.spec.clone(),
            embed: self.embed.bind(tape, binder),
            layers: self.layers.iter().map(|l| l.bind(tape, binder)).collect(),
            head: binder.bind(tape, &self.head),
        }
    }

    pub(crate) fn check_input(&self, x: &Array3<f64>) -> Result<(), ModelError> {
        let (_, n, width) = x.dim();
        if n != self.spec.tokens {
            return Err(ModelError::TokenMismatch { expected: self.spec.tokens, got: n });
        }
        if width != self.spec.input_dim {
            return Err(ModelError::InputWidth { expected: self.spec.input_dim, got: width });
        }
        Ok(())
    }
}

/// Tape handles for one example's pass through the backbone.
#[derive(Clone, Debug)]
pub struct BackboneTrace {
    /// `b^1..b^L`, each `N×D_B`.
    pub features: Vec<Tensor>,
    /// `Y^B = GAP(b^L)·W_B`, `1×D_out`.
    pub logits: Tensor,
}

pub struct BoundBackbone {
    spec: ArchSpec,
    embed: BoundLinear,
    layers: Vec<BoundEncoderLayer>,
    head: Tensor,
}

impl BoundBackbone {
    /// Runs one example (`N×input_dim`) through the backbone.
    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<BackboneTrace, ModelError> {
        let shape = tape.shape(x)?;
        if shape.len() != 2 || shape[0] != self.spec.tokens {
            let got = shape.first().copied().unwrap_or(0);
            return Err(ModelError::TokenMismatch { expected: self.spec.tokens, got });
        }
        let prev = tape.segment();
        tape.set_segment(Segment::Embedding);
        let mut h = self.embed.forward(tape, x)?;
        tape.set_segment(Segment::Backbone);
        let mut features = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = layer.forward(tape, h)?;
            features.push(h);
        }
        tape.set_segment(Segment::Heads);
        let pooled = tape.gap(h)?;
        let logits = tape.matmul(pooled, self.head)?;
        tape.set_segment(prev);
        Ok(BackboneTrace { features, logits })
    }
}

/// Materialized backbone outputs for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput {
    pub features: Vec<Array2<f64>>,
    pub logits: Array1<f64>,
}

fn to_2d(a: &crate::autodiff::Array) -> Array2<f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-D feature").to_owned()
}

/// Runs a `batch×N×input_dim` batch through the backbone without recording
/// anything for backward.
pub fn backbone_forward(model: &BackboneModel, x: &Array3<f64>) -> Result<Vec<BackboneOutput>, ModelError> {
    model.check_input(x)?;
    let mut out = Vec::with_capacity(x.len_of(Axis(0)));
    for example in x.axis_iter(Axis(0)) {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &mut ConstBinder);
        let input = tape.input(example.to_owned().into_dyn());
        let trace = bound.forward(&mut tape, input)?;
        let features = trace.features.iter().map(|&f| tape.value(f).map(to_2d)).collect::<Result<Vec<_>, _>>()?;
        let logits = to_2d(tape.value(trace.logits)?).row(0).to_owned();
        out.push(BackboneOutput { features, logits });
    }
    Ok(out)
}

/// Inference with the side network discarded: only the backbone and its head run.
/// Returns `batch×D_out` logits.
pub fn faded_forward(model: &BackboneModel, x: &Array3<f64>) -> Result<Array2<f64>, ModelError> {
    Ok(faded_forward_counted(model, x)?.0)
}

/// Like [`faded_forward`], also returning the multiply-add FLOPs recorded per example.
pub fn faded_forward_counted(model: &BackboneModel, x: &Array3<f64>) -> Result<(Array2<f64>, u64), ModelError> {
    model.check_input(x)?;
    let batch = x.len_of(Axis(0));
    let mut logits = Array2::<f64>::zeros((batch, model.spec.out_dim));
    let mut flops = 0;
    for (i, example) in x.axis_iter(Axis(0)).enumerate() {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &mut ConstBinder);
        let input = tape.input(example.to_owned().into_dyn());
        let trace = bound.forward(&mut tape, input)?;
        logits.row_mut(i).assign(&to_2d(tape.value(trace.logits)?).row(0));
        flops = tape.total_flops();
    }
    Ok((logits, flops))
}
