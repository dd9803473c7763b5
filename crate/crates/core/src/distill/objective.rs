use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Segment, Tape, Tensor};
use crate::model::{ArchSpec, BackboneTrace, Initializer, Param, ParamBinder, ParamKind, SideTrace};

use super::generation::{BoundGeneration, GenerationBlock};
use super::losses::{loss_deep_node, loss_logits_node, loss_shallow_node, task_loss_node};
use super::mask::{apply_mask_node, sample_mask, BoundMask, MaskVector};
use super::projector::{BottleneckProjector, BoundProjector};
use super::{DistillConfig, DistillError};

/// Mask token and generation block of one deep layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepParts {
    pub mask_token: Param,
    pub generator: GenerationBlock,
}

/// Distillation modules attached to one layer (one-based index).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDistiller {
    pub layer: usize,
    pub deep: bool,
    pub projector: BottleneckProjector,
    /// Present for deep layers when generation is enabled.
    pub generation: Option<DeepParts>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillModules {
    pub layers: Vec<LayerDistiller>,
    /// Square `D_out → D_out` map applied to the backbone logits; identity and frozen.
    pub logit_proj: BottleneckProjector,
}

pub fn build_distiller(spec: &ArchSpec, cfg: &DistillConfig, seed: u64) -> Result<DistillModules, DistillError> {
    spec.validate()?;
    cfg.validate(spec)?;
    let mut init = Initializer::new(seed);
    let mut roles: Vec<(usize, bool)> = cfg
        .shallow_layers
        .iter()
        .map(|&l| (l, false))
        .chain(cfg.deep_layers.iter().map(|&l| (l, true)))
        .collect();
    roles.sort_unstable();
    let mut layers = Vec::with_capacity(roles.len());
    for (layer, deep) in roles {
        let name = format!("distill.layers.{layer}");
        let projector =
            BottleneckProjector::new(&mut init, &format!("{name}.proj"), spec.side_hidden(), spec.hidden, cfg.rank)?;
        let generation = (deep && cfg.generation).then(|| DeepParts {
            mask_token: Initializer::zeros(format!("{name}.mask_token"), 1, spec.hidden, ParamKind::MaskToken),
            generator: GenerationBlock::new(&mut init, &format!("{name}.gen"), spec.hidden),
        });
        layers.push(LayerDistiller { layer, deep, projector, generation });
    }
    let mut logit_proj = BottleneckProjector::identity("distill.logits_proj", spec.out_dim);
    for p in logit_proj.params_mut() {
        p.requires_grad = false;
    }
    Ok(DistillModules { layers, logit_proj })
}

impl DistillModules {
    pub fn params(&self) -> Vec<&Param> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend(l.projector.params());
            if let Some(g) = &l.generation {
                v.push(&g.mask_token);
                v.extend(g.generator.params());
            }
        }
        v.extend(self.logit_proj.params());
        v
    }

    /// Every parameter except the frozen logits projector.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.extend(l.projector.params_mut());
            if let Some(g) = &mut l.generation {
                v.push(&mut g.mask_token);
                v.extend(g.generator.params_mut());
            }
        }
        v
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut dyn ParamBinder) -> BoundDistiller {
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                layer: l.layer,
                deep: l.deep,
                projector: l.projector.bind(tape, binder),
                generation: l.generation.as_ref().map(|g| (binder.bind(tape, &g.mask_token), g.generator.bind(tape, binder))),
            })
            .collect();
        BoundDistiller { layers, logit_proj: self.logit_proj.bind(tape, binder) }
    }
}

struct BoundLayer {
    layer: usize,
    deep: bool,
    projector: BoundProjector,
    generation: Option<(Tensor, BoundGeneration)>,
}

pub struct BoundDistiller {
    layers: Vec<BoundLayer>,
    logit_proj: BoundProjector,
}

/// Batch-mean loss terms, each of them a one-element tensor.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Tensor,
    pub sft: Tensor,
    pub log: Tensor,
    /// `(layer, loss)` for shallow layers.
    pub sha: Vec<(usize, Tensor)>,
    /// `(layer, loss)` for deep layers.
    pub deep: Vec<(usize, Tensor)>,
}

impl Objective {
    pub fn breakdown(&self, tape: &Tape, cfg: &DistillConfig) -> Result<LossBreakdown, DistillError> {
        let values = |terms: &[(usize, Tensor)]| -> Result<Vec<f64>, DistillError> {
            terms.iter().map(|&(_, t)| Ok(tape.scalar(t)?)).collect()
        };
        Ok(LossBreakdown {
            sft: tape.scalar(self.sft)?,
            log: tape.scalar(self.log)?,
            sha_per_layer: values(&self.sha)?,
            deep_per_layer: values(&self.deep)?,
            total: tape.scalar(self.total)?,
            weights: [cfg.w_sft, cfg.w_log, cfg.w_sha, cfg.w_deep],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sft: f64,
    pub log: f64,
    pub sha_per_layer: Vec<f64>,
    pub deep_per_layer: Vec<f64>,
    pub total: f64,
    /// `[w_sft, w_log, w_sha, w_deep]` used to form `total`.
    pub weights: [f64; 4],
}

impl LossBreakdown {
    /// A breakdown holding only the task term.
    pub fn task_only(sft: f64) -> Self {
        LossBreakdown {
            sft,
            log: 0.0,
            sha_per_layer: Vec::new(),
            deep_per_layer: Vec::new(),
            total: sft,
            weights: [1.0, 0.0, 0.0, 0.0],
        }
    }

    /// `w_sft·sft + w_log·log + w_sha·Σsha + w_deep·Σdeep`, evaluated in the
    /// same order as the recorded objective.
    pub fn weighted_sum(&self) -> f64 {
        let [w_sft, w_log, w_sha, w_deep] = self.weights;
        let mut total = self.sft * w_sft + self.log * w_log;
        if let Some(s) = sum_in_order(&self.sha_per_layer) {
            total += s * w_sha;
        }
        if let Some(s) = sum_in_order(&self.deep_per_layer) {
            total += s * w_deep;
        }
        total
    }
}

fn sum_in_order(values: &[f64]) -> Option<f64> {
    let (first, rest) = values.split_first()?;
    Some(rest.iter().fold(*first, |acc, v| acc + v))
}

fn sum_nodes(tape: &mut Tape, nodes: &[Tensor]) -> Result<Option<Tensor>, DistillError> {
    let Some((&first, rest)) = nodes.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &n in rest {
        acc = tape.add(acc, n)?;
    }
    Ok(Some(acc))
}

fn batch_mean(tape: &mut Tape, nodes: &[Tensor]) -> Result<Tensor, DistillError> {
    let sum = sum_nodes(tape, nodes)?.ok_or_else(|| DistillError::Batch("empty batch".into()))?;
    Ok(tape.scale(sum, 1.0 / nodes.len() as f64)?)
}

/// Builds the combined objective over a batch.
///
/// `side` must have been run on detached backbone features. Teacher features
/// are detached again here, as are the side logits inside the logits loss, so
/// feature losses reach only side and distillation parameters and the logits
/// loss reaches only the backbone. One `mask` serves every deep layer and
/// every example of the step.
#[allow(clippy::too_many_arguments)]
pub fn objective_with_mask(
    tape: &mut Tape,
    backbone: &[BackboneTrace],
    side: &[SideTrace],
    labels: &[usize],
    distiller: &BoundDistiller,
    cfg: &DistillConfig,
    mask: &MaskVector,
) -> Result<Objective, DistillError> {
    if backbone.is_empty() || backbone.len() != side.len() || backbone.len() != labels.len() {
        return Err(DistillError::Batch(format!(
            "{} backbone traces, {} side traces, {} labels",
            backbone.len(),
            side.len(),
            labels.len()
        )));
    }
    let prev = tape.segment();
    let bound_mask = BoundMask::new(tape, mask);

    let mut sft_terms = Vec::with_capacity(labels.len());
    let mut log_terms = Vec::with_capacity(labels.len());
    let mut layer_terms: Vec<Vec<Tensor>> = vec![Vec::with_capacity(labels.len()); distiller.layers.len()];

    for ((b, s), &label) in backbone.iter().zip(side).zip(labels) {
        tape.set_segment(Segment::Loss);
        let mut sft = task_loss_node(tape, s.logits, label)?;
        if cfg.task_on_backbone {
            let extra = task_loss_node(tape, b.logits, label)?;
            sft = tape.add(sft, extra)?;
        }
        sft_terms.push(sft);

        tape.set_segment(Segment::Projectors);
        let projected = distiller.logit_proj.forward(tape, b.logits)?;
        tape.set_segment(Segment::Loss);
        let teacher_logits = tape.detach(s.logits)?;
        log_terms.push(loss_logits_node(tape, teacher_logits, projected)?);

        for (bl, terms) in distiller.layers.iter().zip(layer_terms.iter_mut()) {
            let idx = bl.layer - 1;
            let student = *s.features.get(idx).ok_or_else(|| DistillError::Batch(format!("missing side layer {}", bl.layer)))?;
            let teacher = *b.features.get(idx).ok_or_else(|| DistillError::Batch(format!("missing backbone layer {}", bl.layer)))?;
            tape.set_segment(Segment::Projectors);
            let aligned = bl.projector.forward(tape, student)?;
            let term = match &bl.generation {
                Some((token, generator)) => {
                    let masked = apply_mask_node(tape, aligned, &bound_mask, *token)?;
                    let generated = generator.forward(tape, masked)?;
                    tape.set_segment(Segment::Loss);
                    let teacher = tape.detach(teacher)?;
                    loss_deep_node(tape, teacher, generated, &bound_mask)?
                }
                None => {
                    tape.set_segment(Segment::Loss);
                    let teacher = tape.detach(teacher)?;
                    loss_shallow_node(tape, teacher, aligned)?
                }
            };
            terms.push(term);
        }
    }

    tape.set_segment(Segment::Loss);
    let sft = batch_mean(tape, &sft_terms)?;
    let log = batch_mean(tape, &log_terms)?;
    let mut sha = Vec::new();
    let mut deep = Vec::new();
    for (bl, terms) in distiller.layers.iter().zip(&layer_terms) {
        let mean = batch_mean(tape, terms)?;
        if bl.deep {
            deep.push((bl.layer, mean));
        } else {
            sha.push((bl.layer, mean));
        }
    }

    let a = tape.scale(sft, cfg.w_sft)?;
    let b = tape.scale(log, cfg.w_log)?;
    let mut total = tape.add(a, b)?;
    let sha_nodes: Vec<Tensor> = sha.iter().map(|&(_, t)| t).collect();
    if let Some(s) = sum_nodes(tape, &sha_nodes)? {
        let s = tape.scale(s, cfg.w_sha)?;
        total = tape.add(total, s)?;
    }
    let deep_nodes: Vec<Tensor> = deep.iter().map(|&(_, t)| t).collect();
    if let Some(s) = sum_nodes(tape, &deep_nodes)? {
        let s = tape.scale(s, cfg.w_deep)?;
        total = tape.add(total, s)?;
    }
    tape.set_segment(prev);
    Ok(Objective { total, sft, log, sha, deep })
}

/// Draws the step's shared mask from `rng`, then builds the objective.
#[allow(clippy::too_many_arguments)]
pub fn combined_objective<R: Rng + ?Sized>(
    tape: &mut Tape,
    backbone: &[BackboneTrace],
    side: &[SideTrace],
    labels: &[usize],
    distiller: &BoundDistiller,
    cfg: &DistillConfig,
    tokens: usize,
    rng: &mut R,
) -> Result<(Objective, MaskVector), DistillError> {
    let mask = sample_mask(tokens, cfg.lambda, rng)?;
    let objective = objective_with_mask(tape, backbone, side, labels, distiller, cfg, &mask)?;
    Ok((objective, mask))
}
