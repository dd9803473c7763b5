use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::{LossBreakdown, MaskVector};
use crate::memory::analytic_memory;
use crate::model::{build_backbone, frozen_backbone_params, params_digest, BackboneModel};
use crate::trainer::{
    compute_gradients, derive_seed, evaluate, evaluate_backbone, fit, EvalMode, EvalResult, Mode, StepRecord,
    TransferModels, STREAM_HEAD,
};

use super::config::{ConfigError, Origin, TrainConfig};
use super::task::{make_target_task, make_task, SyntheticTask};
use super::HarnessError;

const STREAM_BACKBONE: u64 = 21;
const STREAM_FINETUNE: u64 = 22;

pub fn source_task(cfg: &TrainConfig, seed: u64) -> SyntheticTask {
    make_task(seed, cfg.arch.out_dim, cfg.task.n_train, cfg.task.n_eval, &cfg.arch, cfg.task.noise, cfg.task.radius)
}

pub fn target_task(cfg: &TrainConfig, seed: u64) -> SyntheticTask {
    make_target_task(&source_task(cfg, seed), seed, cfg.task.n_train, cfg.task.n_eval, cfg.arch.tokens)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub backbone: BackboneModel,
    pub accuracy: f64,
    pub converged: bool,
    pub steps: Vec<StepRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    pub steps: u64,
    pub source_accuracy: f64,
    pub min_accuracy: f64,
    pub converged: bool,
    pub final_loss: f64,
}

impl PretrainOutcome {
    pub fn record(&self, cfg: &TrainConfig) -> PretrainRecord {
        PretrainRecord {
            kind: "pretrain".into(),
            seed: cfg.train.seed,
            config_hash: cfg.hash(),
            steps: cfg.pretrain.steps,
            source_accuracy: self.accuracy,
            min_accuracy: cfg.pretrain.min_accuracy,
            converged: self.converged,
            final_loss: self.steps.last().map_or(f64::NAN, |s| s.loss.total),
        }
    }
}

/// Trains a fresh backbone end to end on the source task of `cfg.train.seed`.
/// Parameters are rounded to checkpoint precision before returning.
pub fn pretrain(cfg: &TrainConfig) -> Result<PretrainOutcome, HarnessError> {
    let seed = cfg.train.seed;
    let task = source_task(cfg, seed);
    let backbone = build_backbone(&cfg.arch, derive_seed(seed, STREAM_BACKBONE))?;
    let mut models = TransferModels::new(backbone, Mode::FullFt, cfg.distill_config().map_err(HarnessError::Setup)?, seed)?;
    let steps = fit(&mut models, &task.train, &cfg.pretrain_fit_config(), derive_seed(seed, STREAM_BACKBONE), |_| {})?;
    let mut backbone = models.backbone;
    backbone.round_to_checkpoint();
    for p in backbone.params_mut() {
        p.requires_grad = true;
    }
    let accuracy = evaluate_backbone(&backbone, &task.eval)?.accuracy;
    Ok(PretrainOutcome { backbone, accuracy, converged: accuracy >= cfg.pretrain.min_accuracy, steps })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub faded_accuracy: f64,
    pub assisted_accuracy: Option<f64>,
}

/// One fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: String,
    pub mode: Mode,
    pub tag: String,
    pub seed: u64,
    pub lambda: f64,
    pub config_hash: String,
    pub steps: Vec<StepRecord>,
    pub final_loss: LossBreakdown,
    /// Accuracy of the backbone with its freshly drawn head, before any update.
    pub baseline_faded_accuracy: f64,
    pub faded: EvalResult,
    pub assisted: Option<EvalResult>,
    pub evals: Vec<EvalPoint>,
    pub trainable_params: usize,
    /// SHA-256 of the parameters the mode must leave untouched, before and after.
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
    pub freeze_intact: bool,
    /// Stored scalars of this mode's step relative to a full fine-tuning step, per the analytic model.
    pub mem_ratio_analytic: f64,
    /// Same ratio measured on the tape for one example.
    pub mem_ratio_measured: f64,
    pub wall_clock_secs: f64,
}

fn analytic_ratio(cfg: &TrainConfig, mode: Mode) -> Result<f64, HarnessError> {
    let report = analytic_memory(&cfg.arch)?;
    let full = report.full_ft as f64;
    Ok(match mode {
        Mode::FullFt => 1.0,
        Mode::Partial | Mode::Mdpd => report.petl_lower_bound as f64 / full,
        Mode::SideOnly => report.side_network as f64 / full,
    })
}

fn measured_ratio(models: &TransferModels, full: &TransferModels, task: &SyntheticTask) -> Result<f64, HarnessError> {
    let one = task.train.head(1);
    let mask = MaskVector { m: vec![0; models.backbone.spec.tokens], lambda: 0.0 };
    let mine = compute_gradients(models, one.x.view(), &one.labels, Some(&mask))?.ledger.total();
    let base = compute_gradients(full, one.x.view(), &one.labels, None)?.ledger.total();
    Ok(mine as f64 / base as f64)
}

/// Warnings for settings the chosen mode ignores.
pub fn mode_warnings(cfg: &TrainConfig) -> Vec<String> {
    let defaults = TrainConfig::default().distill;
    if cfg.train.mode == Mode::Mdpd || cfg.distill == defaults {
        return Vec::new();
    }
    vec![format!("mode {} has no distillation; distill.* settings are ignored", cfg.train.mode)]
}

/// Fine-tunes `pretrained` on the target task of `cfg.train.seed` in `cfg.train.mode`.
pub fn finetune(cfg: &TrainConfig, pretrained: &BackboneModel, tag: &str) -> Result<RunRecord, HarnessError> {
    finetune_models(cfg, pretrained, tag).map(|(record, _)| record)
}

/// [`finetune`], also returning the trained models.
pub fn finetune_models(cfg: &TrainConfig, pretrained: &BackboneModel, tag: &str) -> Result<(RunRecord, TransferModels), HarnessError> {
    let start = Instant::now();
    let seed = cfg.train.seed;
    let mode = cfg.train.mode;
    let task = target_task(cfg, seed);
    let mut backbone = pretrained.clone();
    backbone.reinit_head(derive_seed(seed, STREAM_HEAD));
    let baseline_faded_accuracy = evaluate_backbone(&backbone, &task.eval)?.accuracy;
    let distill_cfg = cfg.distill_config().map_err(HarnessError::Setup)?;
    let full = TransferModels::new(backbone.clone(), Mode::FullFt, distill_cfg.clone(), seed)?;
    let mut models = TransferModels::new(backbone, mode, distill_cfg, seed)?;
    let policy = mode.policy();
    let frozen_digest_before = params_digest(frozen_backbone_params(&models.backbone, &policy));
    let mem_ratio_measured = measured_ratio(&models, &full, &task)?;

    let steps = fit(&mut models, &task.train, &cfg.fit_config(), derive_seed(seed, STREAM_FINETUNE), |_| {})?;

    let frozen_digest_after = params_digest(frozen_backbone_params(&models.backbone, &policy));
    let faded = evaluate(&models, &task.eval, EvalMode::Faded)?;
    let assisted = if mode.has_side() { Some(evaluate(&models, &task.eval, EvalMode::Assisted)?) } else { None };
    let final_loss = steps.last().map(|s| s.loss.clone()).unwrap_or_else(|| LossBreakdown::task_only(f64::NAN));
    let record = RunRecord {
        kind: "run".into(),
        mode,
        tag: tag.to_string(),
        seed,
        lambda: cfg.distill.lambda,
        config_hash: cfg.hash(),
        evals: vec![EvalPoint {
            step: cfg.train.steps,
            faded_accuracy: faded.accuracy,
            assisted_accuracy: assisted.as_ref().map(|a| a.accuracy),
        }],
        steps,
        final_loss,
        baseline_faded_accuracy,
        faded,
        assisted,
        trainable_params: models.trainable_count(),
        freeze_intact: frozen_digest_before == frozen_digest_after,
        frozen_digest_before,
        frozen_digest_after,
        mem_ratio_analytic: analytic_ratio(cfg, mode)?,
        mem_ratio_measured,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((record, models))
}

/// Accuracy of `backbone` (as stored) on a task's eval split.
pub fn eval_backbone_on(backbone: &BackboneModel, task: &SyntheticTask) -> Result<EvalResult, HarnessError> {
    Ok(evaluate_backbone(backbone, &task.eval)?)
}

/// One axis of an ablation grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<String>,
}

pub const SWEEPABLE: [&str; 3] = ["distill.lambda", "distill.layers", "distill.generation"];

impl std::str::FromStr for Sweep {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        let (key, values) = s
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { text: s.to_string(), origin: Origin::Flag })?;
        let key = key.trim().to_string();
        if !SWEEPABLE.contains(&key.as_str()) {
            return Err(ConfigError::Invalid {
                key,
                origin: Origin::Flag,
                reason: format!("sweeps cover {}", SWEEPABLE.join(", ")),
            });
        }
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(ConfigError::Invalid { key, origin: Origin::Flag, reason: "no values given".into() });
        }
        Ok(Sweep { key, values })
    }
}

/// Configurations of the grid, one per `(value, seed)`, tagged `key=value`.
pub fn sweep_configs(cfg: &TrainConfig, sweep: &Sweep) -> Result<Vec<(String, TrainConfig)>, ConfigError> {
    let mut out = Vec::new();
    for value in &sweep.values {
        for k in 0..cfg.ablate_seeds as u64 {
            let mut c = cfg.clone();
            c.set(&sweep.key, value, Origin::Flag)?;
            c.train.seed = cfg.train.seed + k;
            c.train.mode = Mode::Mdpd;
            c.validate()?;
            out.push((format!("{}={value}", sweep.key), c));
        }
    }
    Ok(out)
}

/// Runs every grid point, pretraining once per seed. Records come back in grid order.
pub fn ablate(cfg: &TrainConfig, sweep: &Sweep) -> Result<Vec<RunRecord>, HarnessError> {
    let grid = sweep_configs(cfg, sweep)?;
    let seeds: Vec<u64> = (0..cfg.ablate_seeds as u64).map(|k| cfg.train.seed + k).collect();
    let backbones: BTreeMap<u64, BackboneModel> = seeds
        .par_iter()
        .map(|&seed| {
            let mut c = cfg.clone();
            c.train.seed = seed;
            let out = pretrain(&c)?;
            if !out.converged {
                return Err(HarnessError::Convergence(format!(
                    "pretraining seed {seed} reached {:.4}, below {}",
                    out.accuracy, cfg.pretrain.min_accuracy
                )));
            }
            Ok((seed, out.backbone))
        })
        .collect::<Result<_, HarnessError>>()?;
    grid.par_iter().map(|(tag, c)| finetune(c, &backbones[&c.train.seed], tag)).collect()
}

/// Fraction of eval examples per class, for quick sanity checks.
pub fn class_balance(task: &SyntheticTask, classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &l in &task.eval.labels {
        counts[l] += 1;
    }
    let n = task.eval.x.len_of(Axis(0)).max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}
