//! Optimizer, schedule, per-step orchestration and evaluation.

mod optim;
mod schedule;

pub use optim::{adamw_step, check_coverage, grad_norm, NamedGrads, OptimConfig, OptimState};
pub use schedule::{lr_schedule, warmup_steps, ScheduleConfig, ScheduleKind};

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array3, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, MemoryLedger, Segment, Tape, Tensor};
use crate::distill::{
    build_distiller, objective_with_mask, sample_mask, task_loss_node, DistillConfig, DistillError, DistillModules,
    LossBreakdown, MaskVector,
};
use crate::memory::{count_flops, MemoryError};
use crate::model::{
    apply_freeze, build_side, faded_forward, BackboneModel, ConstBinder, FreezePolicy, LeafBinder, ModelError, Param,
    ParamBinder, SideModel,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("gradient supplied for frozen parameter {0}")]
    FreezeBreach(String),
    #[error("no gradient for trainable parameter {0}")]
    MissingGradient(String),
    #[error("gradient for unknown parameter {0}")]
    UnknownGradient(String),
    #[error("gradient for {name} has shape {got:?}, parameter has {expected:?}")]
    GradientShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("{0}")]
    Wiring(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss became non-finite at step {0}")]
    Diverged(u64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Which parameters train and which objective drives them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Side network with dual-path distillation; backbone layernorms and head tuned.
    Mdpd,
    /// Every backbone parameter trains on the task loss; no side network.
    FullFt,
    /// Backbone layernorms and head train on the task loss.
    Partial,
    /// Frozen backbone; the side network trains on the task loss alone.
    SideOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Mdpd, Mode::FullFt, Mode::Partial, Mode::SideOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Mdpd => "mdpd",
            Mode::FullFt => "full_ft",
            Mode::Partial => "partial",
            Mode::SideOnly => "side_only",
        }
    }

    pub fn policy(self) -> FreezePolicy {
        match self {
            Mode::Mdpd => FreezePolicy::MDPD,
            Mode::FullFt => FreezePolicy::FULL_FT,
            Mode::Partial => FreezePolicy::PARTIAL,
            Mode::SideOnly => FreezePolicy::SIDE_ONLY,
        }
    }

    pub fn has_side(self) -> bool {
        matches!(self, Mode::Mdpd | Mode::SideOnly)
    }

    pub fn distills(self) -> bool {
        self == Mode::Mdpd
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}`, expected one of mdpd, full_ft, partial, side_only"))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Independent sub-seed for one random stream of a run.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const STREAM_SIDE: u64 = 1;
pub const STREAM_DISTILL: u64 = 2;
pub const STREAM_BATCHES: u64 = 3;
pub const STREAM_MASKS: u64 = 4;
pub const STREAM_HEAD: u64 = 5;

/// Labelled examples, `batch×N×input_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Array3<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset { x: self.x.select(Axis(0), idx), labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }

    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset { x: self.x.slice(s![..n, .., ..]).to_owned(), labels: self.labels[..n].to_vec() }
    }
}

/// Backbone plus the mode-dependent side network and distillation modules.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferModels {
    pub mode: Mode,
    pub backbone: BackboneModel,
    pub side: Option<SideModel>,
    pub distill: Option<DistillModules>,
    pub distill_config: DistillConfig,
}

impl TransferModels {
    /// Attaches the modules `mode` needs to `backbone` and applies its freeze policy.
    pub fn new(mut backbone: BackboneModel, mode: Mode, distill_config: DistillConfig, seed: u64) -> Result<Self, TrainError> {
        let spec = backbone.spec.clone();
        let mut side = if mode.has_side() { Some(build_side(&spec, derive_seed(seed, STREAM_SIDE))?) } else { None };
        let distill = if mode.distills() {
            Some(build_distiller(&spec, &distill_config, derive_seed(seed, STREAM_DISTILL))?)
        } else {
            None
        };
        apply_freeze(&mut backbone, side.as_mut(), mode.policy());
        Ok(TransferModels { mode, backbone, side, distill, distill_config })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        if let Some(s) = &self.side {
            v.extend(s.params());
        }
        if let Some(d) = &self.distill {
            v.extend(d.params());
        }
        v
    }

    /// Parameters the optimizer may touch; the frozen logits projector is left out.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.backbone.params_mut();
        if let Some(s) = &mut self.side {
            v.extend(s.params_mut());
        }
        if let Some(d) = &mut self.distill {
            v.extend(d.params_mut());
        }
        v
    }

    pub fn trainable_count(&self) -> usize {
        self.params().iter().filter(|p| p.requires_grad).map(|p| p.numel()).sum()
    }
}

/// Result of one forward and backward over a batch.
#[derive(Clone, Debug)]
pub struct StepGraph {
    pub breakdown: LossBreakdown,
    pub grads: NamedGrads,
    /// Retained scalars just before the reverse pass.
    pub ledger: MemoryLedger,
    /// Forward FLOPs recorded on the tape.
    pub flops: u64,
}

/// Objective recorded on a tape, with its loss terms already evaluated.
#[derive(Clone, Debug)]
pub struct RecordedObjective {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

/// Records the mode's objective over `(x, labels)` on `tape`, binding every
/// parameter through `binder`. `mask` is required in distillation mode and
/// ignored otherwise.
pub fn record_objective(
    tape: &mut Tape,
    binder: &mut dyn ParamBinder,
    models: &TransferModels,
    x: ArrayView3<f64>,
    labels: &[usize],
    mask: Option<&MaskVector>,
) -> Result<RecordedObjective, TrainError> {
    if labels.is_empty() || labels.len() != x.len_of(Axis(0)) {
        return Err(TrainError::Wiring(format!("{} inputs for {} labels", x.len_of(Axis(0)), labels.len())));
    }
    let mode = models.mode;
    let bb = models.backbone.bind(tape, binder);
    let side = models.side.as_ref().map(|s| s.bind(tape, binder));
    let dist = models.distill.as_ref().map(|d| d.bind(tape, binder));
    if mode.has_side() != side.is_some() || mode.distills() != dist.is_some() {
        return Err(TrainError::Wiring(format!("{mode} models are missing modules")));
    }

    let mut b_traces = Vec::with_capacity(labels.len());
    let mut s_traces = Vec::with_capacity(labels.len());
    for example in x.axis_iter(Axis(0)) {
        tape.set_segment(Segment::Embedding);
        let input = tape.input(example.to_owned().into_dyn());
        let bt = bb.forward(tape, input)?;
        if let Some(side) = &side {
            let feats = bt.features.iter().map(|&f| tape.detach(f)).collect::<Result<Vec<Tensor>, _>>()?;
            s_traces.push(side.forward(tape, &feats)?);
        }
        b_traces.push(bt);
    }

    match (mode, dist) {
        (Mode::Mdpd, Some(dist)) => {
            let mask = mask.ok_or_else(|| TrainError::Wiring("distillation step needs a mask".into()))?;
            let cfg = &models.distill_config;
            let obj = objective_with_mask(tape, &b_traces, &s_traces, labels, &dist, cfg, mask)?;
            let breakdown = obj.breakdown(tape, cfg)?;
            Ok(RecordedObjective { total: obj.total, breakdown })
        }
        _ => {
            tape.set_segment(Segment::Loss);
            let mut sum: Option<Tensor> = None;
            for (i, &label) in labels.iter().enumerate() {
                let logits = if mode == Mode::SideOnly { s_traces[i].logits } else { b_traces[i].logits };
                let l = task_loss_node(tape, logits, label)?;
                sum = Some(match sum {
                    Some(acc) => tape.add(acc, l)?,
                    None => l,
                });
            }
            let mean = tape.scale(sum.expect("nonempty batch"), 1.0 / labels.len() as f64)?;
            Ok(RecordedObjective { total: mean, breakdown: LossBreakdown::task_only(tape.scalar(mean)?) })
        }
    }
}

/// Records the mode's objective over `(x, labels)` and runs one backward pass.
pub fn compute_gradients(
    models: &TransferModels,
    x: ArrayView3<f64>,
    labels: &[usize],
    mask: Option<&MaskVector>,
) -> Result<StepGraph, TrainError> {
    let mut tape = Tape::new();
    let mut binder = LeafBinder::new();
    let obj = record_objective(&mut tape, &mut binder, models, x, labels, mask)?;
    let ledger = tape.ledger_snapshot();
    let flops = tape.total_flops();
    let mut gmap = tape.backward(obj.total)?;
    let mut grads = NamedGrads::new();
    for (name, leaf) in binder.trainable() {
        if let Some(g) = gmap.remove(leaf) {
            grads.insert(name.clone(), g);
        }
    }
    Ok(StepGraph { breakdown: obj.breakdown, grads, ledger, flops })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
    /// The mask consumed by this step, in distillation mode.
    pub mask: Option<MaskVector>,
}

/// One forward, one backward and one AdamW update; draws exactly one mask in
/// distillation mode.
pub fn train_step<R: Rng + ?Sized>(
    models: &mut TransferModels,
    x: ArrayView3<f64>,
    labels: &[usize],
    state: &mut OptimState,
    lr: f64,
    mask_rng: &mut R,
) -> Result<StepOutcome, TrainError> {
    let mask = if models.mode.distills() {
        Some(sample_mask(models.backbone.spec.tokens, models.distill_config.lambda, mask_rng)?)
    } else {
        None
    };
    let graph = compute_gradients(models, x, labels, mask.as_ref())?;
    let grad_norm = grad_norm(&graph.grads);
    adamw_step(state, &graph.grads, models.params_mut(), lr)?;
    Ok(StepOutcome { breakdown: graph.breakdown, grad_norm, mask })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub steps: u64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

/// Runs `cfg.steps` updates on shuffled minibatches of `data`.
pub fn fit(
    models: &mut TransferModels,
    data: &Dataset,
    cfg: &FitConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_BATCHES));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_MASKS));
    let mut state = OptimState::new(cfg.optim.clone());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let batch = cfg.batch_size.clamp(1, data.len());
    let mut records = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut batch_rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let x = data.x.select(Axis(0), idx);
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let lr = lr_schedule(step + 1, cfg.steps, cfg.optim.lr, cfg.schedule.kind, cfg.schedule.warmup_frac);
        let out = train_step(models, x.view(), &labels, &mut state, lr, &mut mask_rng)?;
        if !out.breakdown.total.is_finite() {
            return Err(TrainError::Diverged(step));
        }
        let record = StepRecord { step, lr, grad_norm: out.grad_norm, loss: out.breakdown };
        on_step(&record);
        records.push(record);
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Scores the side-network logits; the side branch runs.
    Assisted,
    /// Scores the backbone logits with the side branch discarded.
    Faded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Forward FLOPs per example.
    pub flops: u64,
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Accuracy of the backbone alone, the side branch never touched.
pub fn evaluate_backbone(backbone: &BackboneModel, data: &Dataset) -> Result<EvalResult, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let logits = faded_forward(backbone, &data.x)?;
    let correct = logits.rows().into_iter().zip(&data.labels).filter(|(r, &l)| argmax(r.iter().copied()) == l).count();
    Ok(EvalResult {
        accuracy: correct as f64 / data.len() as f64,
        correct,
        total: data.len(),
        flops: count_flops(&backbone.spec, true)?.faded_total,
    })
}

pub fn evaluate(models: &TransferModels, data: &Dataset, mode: EvalMode) -> Result<EvalResult, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    match mode {
        EvalMode::Faded => evaluate_backbone(&models.backbone, data),
        EvalMode::Assisted => {
            let side = models.side.as_ref().ok_or_else(|| TrainError::Wiring(format!("{} has no side network", models.mode)))?;
            let spec = &models.backbone.spec;
            if data.x.shape()[1] != spec.tokens {
                return Err(ModelError::TokenMismatch { expected: spec.tokens, got: data.x.shape()[1] }.into());
            }
            let mut correct = 0;
            for (example, &label) in data.x.axis_iter(Axis(0)).zip(&data.labels) {
                let mut tape = Tape::new();
                let bb = models.backbone.bind(&mut tape, &mut ConstBinder);
                let sb = side.bind(&mut tape, &mut ConstBinder);
                let input = tape.input(example.to_owned().into_dyn());
                let bt = bb.forward(&mut tape, input)?;
                let st = sb.forward(&mut tape, &bt.features)?;
                if argmax(tape.value(st.logits)?.iter().copied()) == label {
                    correct += 1;
                }
            }
            Ok(EvalResult {
                accuracy: correct as f64 / data.len() as f64,
                correct,
                total: data.len(),
                flops: count_flops(spec, false)?.training_total,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_backbone, ArchSpec};
    use ndarray::Array3;

    fn tiny() -> ArchSpec {
        ArchSpec { layers: 2, tokens: 4, hidden: 8, reduction: 2, input_dim: 3, out_dim: 2, mlp_ratio: 2 }
    }

    fn data(n: usize) -> Dataset {
        let x = Array3::from_shape_fn((n, 4, 3), |(e, i, j)| ((e * 12 + i * 3 + j) as f64 * 0.61).sin());
        Dataset { x, labels: (0..n).map(|i| i % 2).collect() }
    }

    fn models(mode: Mode) -> TransferModels {
        let spec = tiny();
        TransferModels::new(build_backbone(&spec, 1).unwrap(), mode, DistillConfig::for_spec(&spec), 7).unwrap()
    }

    #[test]
    fn modes_parse_and_allocate() {
        assert_eq!("side_only".parse::<Mode>().unwrap(), Mode::SideOnly);
        assert!("adapter".parse::<Mode>().is_err());
        assert!(models(Mode::FullFt).side.is_none());
        assert!(models(Mode::SideOnly).distill.is_none());
        assert!(models(Mode::Mdpd).distill.is_some());
    }

    #[test]
    fn gradients_cover_trainables_in_every_mode() {
        let d = data(3);
        for mode in Mode::ALL {
            let m = models(mode);
            let mask = MaskVector { m: vec![1, 0, 1, 0], lambda: 0.5 };
            let g = compute_gradients(&m, d.x.view(), &d.labels, Some(&mask)).unwrap();
            let mut params = {
                let mut m2 = m.clone();
                m2.params_mut().into_iter().map(|p| p.clone()).collect::<Vec<_>>()
            };
            let refs: Vec<&mut Param> = params.iter_mut().collect();
            check_coverage(&g.grads, &refs).unwrap();
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let d = data(8);
        let cfg = FitConfig { optim: OptimConfig::default(), schedule: ScheduleConfig::default(), steps: 5, batch_size: 4 };
        let mut a = models(Mode::Mdpd);
        let mut b = models(Mode::Mdpd);
        let ra = fit(&mut a, &d, &cfg, 11, |_| {}).unwrap();
        let rb = fit(&mut b, &d, &cfg, 11, |_| {}).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn evaluation_rules() {
        let m = models(Mode::Mdpd);
        let d = data(6);
        let faded = evaluate(&m, &d, EvalMode::Faded).unwrap();
        let assisted = evaluate(&m, &d, EvalMode::Assisted).unwrap();
        assert!(faded.flops < assisted.flops);
        assert_eq!(evaluate(&m, &d, EvalMode::Faded).unwrap(), faded);
        assert!(matches!(evaluate(&m, &d.head(0), EvalMode::Faded), Err(TrainError::EmptyDataset)));
        assert!(evaluate(&models(Mode::Partial), &d, EvalMode::Assisted).is_err());
    }

    #[test]
    fn mdpd_step_needs_mask() {
        let d = data(2);
        assert!(matches!(compute_gradients(&models(Mode::Mdpd), d.x.view(), &d.labels, None), Err(TrainError::Wiring(_))));
    }
}
