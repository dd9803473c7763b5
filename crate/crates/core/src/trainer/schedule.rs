use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Shape of the decay that follows the linear warmup ramp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(format!("unknown schedule `{other}`, expected linear or cosine")),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Cosine => "cosine",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub warmup_frac: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { kind: ScheduleKind::Linear, warmup_frac: 0.1 }
    }
}

/// Number of warmup steps for a run of `total_steps`.
pub fn warmup_steps(total_steps: u64, warmup_frac: f64) -> u64 {
    ((total_steps as f64 * warmup_frac).round() as u64).min(total_steps)
}

/// Learning rate at `step ∈ [0, total_steps]`: linear ramp from 0 to `base_lr`,
/// then linear or cosine decay to 0.
pub fn lr_schedule(step: u64, total_steps: u64, base_lr: f64, kind: ScheduleKind, warmup_frac: f64) -> f64 {
    let step = step.min(total_steps);
    let warm = warmup_steps(total_steps, warmup_frac);
    if step < warm {
        return base_lr * step as f64 / warm as f64;
    }
    let span = total_steps - warm;
    if span == 0 {
        return base_lr;
    }
    let progress = (step - warm) as f64 / span as f64;
    match kind {
        ScheduleKind::Linear => base_lr * (1.0 - progress),
        ScheduleKind::Cosine => base_lr * 0.5 * (1.0 + (PI * progress).cos()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_values() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            assert_eq!(lr_schedule(0, 100, 0.1, kind, 0.1), 0.0);
            assert_eq!(lr_schedule(10, 100, 0.1, kind, 0.1), 0.1);
            assert!(lr_schedule(100, 100, 0.1, kind, 0.1).abs() < 1e-12);
        }
        assert_eq!(lr_schedule(5, 100, 0.1, ScheduleKind::Linear, 0.1), 0.05);
        assert!((lr_schedule(55, 100, 0.1, ScheduleKind::Cosine, 0.1) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        assert_eq!(lr_schedule(0, 10, 0.2, ScheduleKind::Linear, 0.0), 0.2);
    }

    #[test]
    fn parses_names() {
        assert_eq!("cosine".parse::<ScheduleKind>().unwrap(), ScheduleKind::Cosine);
        assert!("step".parse::<ScheduleKind>().is_err());
    }
}
