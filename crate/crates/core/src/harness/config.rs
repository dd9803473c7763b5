//! Plain-text `key=value` run configuration.
//!
//! One key per line, dotted section prefixes, `#` starts a comment. Keys not
//! listed in [`TrainConfig::dump`] are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distill::DistillConfig;
use crate::model::ArchSpec;
use crate::trainer::{FitConfig, Mode, OptimConfig, ScheduleConfig, ScheduleKind};

/// Where a rejected value came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Flag,
    Validation,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Flag => f.write_str("command-line flag"),
            Origin::Validation => f.write_str("validation"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}: unknown key `{key}`")]
    UnknownKey { key: String, origin: Origin },
    #[error("{origin}: `{key}`: {reason}")]
    Invalid { key: String, origin: Origin, reason: String },
    #[error("{origin}: expected `key=value`, got `{text}`")]
    Syntax { text: String, origin: Origin },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl ConfigError {
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::UnknownKey { key, .. } | ConfigError::Invalid { key, .. } => Some(key),
            _ => None,
        }
    }
}

/// Which layers carry a feature-distillation loss.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSubset {
    All,
    Shallow,
    Deep,
    None,
    /// One-based layer indices; each keeps its default shallow/deep role.
    List(Vec<usize>),
}

impl FromStr for LayerSubset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(LayerSubset::All),
            "shallow" => Ok(LayerSubset::Shallow),
            "deep" => Ok(LayerSubset::Deep),
            "none" => Ok(LayerSubset::None),
            list => {
                let layers = list
                    .split('+')
                    .map(|t| t.trim().parse::<usize>().map_err(|_| format!("`{t}` is not a layer index")))
                    .collect::<Result<Vec<_>, _>>()?;
                if layers.contains(&0) {
                    return Err("layer indices start at 1".into());
                }
                Ok(LayerSubset::List(layers))
            }
        }
    }
}

impl fmt::Display for LayerSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSubset::All => f.write_str("all"),
            LayerSubset::Shallow => f.write_str("shallow"),
            LayerSubset::Deep => f.write_str("deep"),
            LayerSubset::None => f.write_str("none"),
            LayerSubset::List(v) => {
                let parts: Vec<String> = v.iter().map(|l| l.to_string()).collect();
                f.write_str(&parts.join("+"))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSettings {
    pub lambda: f64,
    pub layers: LayerSubset,
    pub generation: bool,
    pub w_log: f64,
    pub w_deep: f64,
    pub w_sha: f64,
    pub w_sft: f64,
    pub rank: usize,
    pub task_on_backbone: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSettings {
    pub n_train: usize,
    pub n_eval: usize,
    pub noise: f64,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub min_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    pub distill: DistillSettings,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainSettings,
    pub task: TaskSettings,
    pub pretrain: PretrainSettings,
    /// Number of seeds per ablation grid point, counted up from `train.seed`.
    pub ablate_seeds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchSpec::default(),
            distill: DistillSettings {
                lambda: 0.5,
                layers: LayerSubset::All,
                generation: true,
                w_log: 1e-4,
                w_deep: 6e-5,
                w_sha: 4e-5,
                w_sft: 1.0,
                rank: 4,
                task_on_backbone: false,
            },
            optim: OptimConfig::default(),
            schedule: ScheduleConfig { kind: ScheduleKind::Linear, warmup_frac: 0.1 },
            train: TrainSettings { steps: 200, batch_size: 16, seed: 0, mode: Mode::Mdpd },
            task: TaskSettings { n_train: 512, n_eval: 256, noise: 1.0, radius: 3.0 },
            pretrain: PretrainSettings { steps: 500, lr: 5e-3, batch_size: 16, min_accuracy: 0.9 },
            ablate_seeds: 3,
        }
    }
}

/// Floats print exactly; small magnitudes use exponent notation.
pub fn fmt_f64(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:e}")
    } else if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str, origin: &Origin) -> Result<T, ConfigError> {
    value.parse::<T>().map_err(|_| ConfigError::Invalid {
        key: key.to_string(),
        origin: origin.clone(),
        reason: format!("cannot parse `{value}` as {}", std::any::type_name::<T>()),
    })
}

fn parse_bool(key: &str, value: &str, origin: &Origin) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(ConfigError::Invalid { key: key.to_string(), origin: origin.clone(), reason: format!("`{value}` is not a boolean") }),
    }
}

fn parse_with<T: FromStr<Err = String>>(key: &str, value: &str, origin: &Origin) -> Result<T, ConfigError> {
    value.parse::<T>().map_err(|reason| ConfigError::Invalid { key: key.to_string(), origin: origin.clone(), reason })
}

impl TrainConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str, origin: Origin) -> Result<(), ConfigError> {
        let o = &origin;
        let value = value.trim();
        match key {
            "arch.layers" => self.arch.layers = parse_num(key, value, o)?,
            "arch.tokens" => self.arch.tokens = parse_num(key, value, o)?,
            "arch.hidden" => self.arch.hidden = parse_num(key, value, o)?,
            "arch.reduction" => self.arch.reduction = parse_num(key, value, o)?,
            "arch.input_dim" => self.arch.input_dim = parse_num(key, value, o)?,
            "arch.classes" => self.arch.out_dim = parse_num(key, value, o)?,
            "arch.mlp_ratio" => self.arch.mlp_ratio = parse_num(key, value, o)?,
            "distill.lambda" => self.distill.lambda = parse_num(key, value, o)?,
            "distill.layers" => self.distill.layers = parse_with(key, value, o)?,
            "distill.generation" => self.distill.generation = parse_bool(key, value, o)?,
            "distill.w_log" => self.distill.w_log = parse_num(key, value, o)?,
            "distill.w_deep" => self.distill.w_deep = parse_num(key, value, o)?,
            "distill.w_sha" => self.distill.w_sha = parse_num(key, value, o)?,
            "distill.w_sft" => self.distill.w_sft = parse_num(key, value, o)?,
            "distill.rank" => self.distill.rank = parse_num(key, value, o)?,
            "distill.task_on_backbone" => self.distill.task_on_backbone = parse_bool(key, value, o)?,
            "optim.name" => {
                if value != "adamw" {
                    return Err(ConfigError::Invalid { key: key.into(), origin, reason: "only adamw is available".into() });
                }
            }
            "optim.lr" => self.optim.lr = parse_num(key, value, o)?,
            "optim.beta1" => self.optim.beta1 = parse_num(key, value, o)?,
            "optim.beta2" => self.optim.beta2 = parse_num(key, value, o)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_num(key, value, o)?,
            "optim.eps" => self.optim.eps = parse_num(key, value, o)?,
            "optim.clip_norm" => self.optim.clip_norm = parse_num(key, value, o)?,
            "schedule.warmup" => self.schedule.kind = parse_with(key, value, o)?,
            "schedule.warmup_frac" => self.schedule.warmup_frac = parse_num(key, value, o)?,
            "train.steps" | "steps" => self.train.steps = parse_num(key, value, o)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, value, o)?,
            "train.seed" | "seed" => self.train.seed = parse_num(key, value, o)?,
            "train.mode" | "mode" => self.train.mode = parse_with(key, value, o)?,
            "task.n_train" => self.task.n_train = parse_num(key, value, o)?,
            "task.n_eval" => self.task.n_eval = parse_num(key, value, o)?,
            "task.noise" => self.task.noise = parse_num(key, value, o)?,
            "task.radius" => self.task.radius = parse_num(key, value, o)?,
            "pretrain.steps" => self.pretrain.steps = parse_num(key, value, o)?,
            "pretrain.lr" => self.pretrain.lr = parse_num(key, value, o)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse_num(key, value, o)?,
            "pretrain.min_accuracy" => self.pretrain.min_accuracy = parse_num(key, value, o)?,
            "ablate.seeds" => self.ablate_seeds = parse_num(key, value, o)?,
            _ => return Err(ConfigError::UnknownKey { key: key.to_string(), origin }),
        }
        let canonical = match key {
            "steps" => "train.steps",
            "seed" => "train.seed",
            "mode" => "train.mode",
            k => k,
        };
        match self.range_error(canonical) {
            Some(reason) => Err(ConfigError::Invalid { key: key.to_string(), origin, reason }),
            None => Ok(()),
        }
    }

    /// Parses file text on top of the defaults. Invariants are checked by [`validate`](Self::validate).
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let origin = Origin::Line(i + 1);
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { text: line.to_string(), origin: origin.clone() })?;
            self.set(key.trim(), value, origin)?;
        }
        Ok(())
    }

    /// Defaults, then `path` (if any), then `overrides` in order, then validation.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v, Origin::Flag)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, reason: String| ConfigError::Invalid { key: key.to_string(), origin: Origin::Validation, reason };
        for line in self.dump().lines() {
            let key = line.split_once('=').map_or(line, |(k, _)| k);
            if let Some(reason) = self.range_error(key) {
                return Err(invalid(key, reason));
            }
        }
        self.arch.validate().map_err(|e| invalid("arch", e.to_string()))?;
        self.distill_config()
            .map_err(|e| invalid("distill.layers", e))?
            .validate(&self.arch)
            .map_err(|e| invalid("distill", e.to_string()))?;
        Ok(())
    }

    /// Range check of a single scalar key, independent of the other keys.
    fn range_error(&self, key: &str) -> Option<String> {
        let unit_closed = |v: f64| (!(0.0..=1.0).contains(&v)).then(|| format!("{v} is outside [0, 1]"));
        let unit_open = |v: f64| (!(0.0..1.0).contains(&v)).then(|| format!("{v} is outside [0, 1)"));
        let nonneg = |v: f64| (!v.is_finite() || v < 0.0).then(|| format!("{v} must be finite and nonnegative"));
        let positive = |v: f64| (!(v.is_finite() && v > 0.0)).then(|| format!("{v} must be finite and positive"));
        let count = |v: usize| (v == 0).then(|| "must be positive".to_string());
        match key {
            "distill.lambda" => unit_closed(self.distill.lambda),
            "distill.w_log" => nonneg(self.distill.w_log),
            "distill.w_deep" => nonneg(self.distill.w_deep),
            "distill.w_sha" => nonneg(self.distill.w_sha),
            "distill.w_sft" => nonneg(self.distill.w_sft),
            "distill.rank" => count(self.distill.rank),
            "optim.beta1" => unit_open(self.optim.beta1),
            "optim.beta2" => unit_open(self.optim.beta2),
            "optim.lr" => nonneg(self.optim.lr),
            "optim.weight_decay" => nonneg(self.optim.weight_decay),
            "optim.clip_norm" => nonneg(self.optim.clip_norm),
            "optim.eps" => positive(self.optim.eps),
            "schedule.warmup_frac" => unit_closed(self.schedule.warmup_frac),
            "task.noise" => nonneg(self.task.noise),
            "task.radius" => positive(self.task.radius),
            "pretrain.lr" => nonneg(self.pretrain.lr),
            "pretrain.min_accuracy" => unit_closed(self.pretrain.min_accuracy),
            "arch.classes" => (self.arch.out_dim < 2).then(|| "at least two classes are needed".to_string()),
            "train.batch_size" => count(self.train.batch_size),
            "pretrain.batch_size" => count(self.pretrain.batch_size),
            "task.n_train" => count(self.task.n_train),
            "task.n_eval" => count(self.task.n_eval),
            "ablate.seeds" => count(self.ablate_seeds),
            _ => None,
        }
    }

    /// Resolves the layer subset against the architecture.
    pub fn distill_config(&self) -> Result<DistillConfig, String> {
        let mut cfg = DistillConfig::for_spec(&self.arch);
        cfg.lambda = self.distill.lambda;
        cfg.w_log = self.distill.w_log;
        cfg.w_deep = self.distill.w_deep;
        cfg.w_sha = self.distill.w_sha;
        cfg.w_sft = self.distill.w_sft;
        cfg.rank = self.distill.rank;
        cfg.generation = self.distill.generation;
        cfg.task_on_backbone = self.distill.task_on_backbone;
        match &self.distill.layers {
            LayerSubset::All => {}
            LayerSubset::Shallow => cfg.deep_layers.clear(),
            LayerSubset::Deep => cfg.shallow_layers.clear(),
            LayerSubset::None => {
                cfg.shallow_layers.clear();
                cfg.deep_layers.clear();
            }
            LayerSubset::List(keep) => {
                if let Some(bad) = keep.iter().find(|&&l| l > self.arch.layers) {
                    return Err(format!("layer {bad} does not exist in a {}-layer model", self.arch.layers));
                }
                cfg.restrict_layers(keep);
            }
        }
        Ok(cfg)
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            optim: self.optim.clone(),
            schedule: self.schedule.clone(),
            steps: self.train.steps,
            batch_size: self.train.batch_size,
        }
    }

    pub fn pretrain_fit_config(&self) -> FitConfig {
        FitConfig {
            optim: OptimConfig { lr: self.pretrain.lr, ..self.optim.clone() },
            schedule: self.schedule.clone(),
            steps: self.pretrain.steps,
            batch_size: self.pretrain.batch_size,
        }
    }

    /// Every key in a fixed order; parsing the output reproduces `self`.
    pub fn dump(&self) -> String {
        let lines: Vec<(&str, String)> = vec![
            ("arch.layers", self.arch.layers.to_string()),
            ("arch.tokens", self.arch.tokens.to_string()),
            ("arch.hidden", self.arch.hidden.to_string()),
            ("arch.reduction", self.arch.reduction.to_string()),
            ("arch.input_dim", self.arch.input_dim.to_string()),
            ("arch.classes", self.arch.out_dim.to_string()),
            ("arch.mlp_ratio", self.arch.mlp_ratio.to_string()),
            ("distill.lambda", fmt_f64(self.distill.lambda)),
            ("distill.layers", self.distill.layers.to_string()),
            ("distill.generation", self.distill.generation.to_string()),
            ("distill.w_log", fmt_f64(self.distill.w_log)),
            ("distill.w_deep", fmt_f64(self.distill.w_deep)),
            ("distill.w_sha", fmt_f64(self.distill.w_sha)),
            ("distill.w_sft", fmt_f64(self.distill.w_sft)),
            ("distill.rank", self.distill.rank.to_string()),
            ("distill.task_on_backbone", self.distill.task_on_backbone.to_string()),
            ("optim.name", "adamw".to_string()),
            ("optim.lr", fmt_f64(self.optim.lr)),
            ("optim.beta1", fmt_f64(self.optim.beta1)),
            ("optim.beta2", fmt_f64(self.optim.beta2)),
            ("optim.weight_decay", fmt_f64(self.optim.weight_decay)),
            ("optim.eps", fmt_f64(self.optim.eps)),
            ("optim.clip_norm", fmt_f64(self.optim.clip_norm)),
            ("schedule.warmup", self.schedule.kind.to_string()),
            ("schedule.warmup_frac", fmt_f64(self.schedule.warmup_frac)),
            ("train.steps", self.train.steps.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.seed", self.train.seed.to_string()),
            ("train.mode", self.train.mode.to_string()),
            ("task.n_train", self.task.n_train.to_string()),
            ("task.n_eval", self.task.n_eval.to_string()),
            ("task.noise", fmt_f64(self.task.noise)),
            ("task.radius", fmt_f64(self.task.radius)),
            ("pretrain.steps", self.pretrain.steps.to_string()),
            ("pretrain.lr", fmt_f64(self.pretrain.lr)),
            ("pretrain.batch_size", self.pretrain.batch_size.to_string()),
            ("pretrain.min_accuracy", fmt_f64(self.pretrain.min_accuracy)),
            ("ablate.seeds", self.ablate_seeds.to_string()),
        ];
        lines.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// SHA-256 of [`dump`](Self::dump).
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.dump().as_bytes()))
    }
}
