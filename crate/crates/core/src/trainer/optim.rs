use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::model::Param;

use super::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 5e-3, beta1: 0.9, beta2: 0.999, weight_decay: 1e-2, eps: 1e-8, clip_norm: 0.0 }
    }
}

/// Named gradients, keyed like the parameters they belong to.
pub type NamedGrads = BTreeMap<String, Array>;

/// AdamW moments for the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step: u64,
    pub first: BTreeMap<String, Array>,
    pub second: BTreeMap<String, Array>,
}

impl OptimState {
    pub fn new(config: OptimConfig) -> Self {
        OptimState { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }
}

/// Checks that `grads` covers exactly the trainable members of `params`.
pub fn check_coverage(grads: &NamedGrads, params: &[&mut Param]) -> Result<(), TrainError> {
    for p in params {
        match (p.requires_grad, grads.get(&p.name)) {
            (false, Some(_)) => return Err(TrainError::FreezeBreach(p.name.clone())),
            (true, None) => return Err(TrainError::MissingGradient(p.name.clone())),
            (true, Some(g)) if g.shape() != p.value.shape() => {
                return Err(TrainError::GradientShape { name: p.name.clone(), expected: p.value.shape().to_vec(), got: g.shape().to_vec() })
            }
            _ => {}
        }
    }
    if let Some(stray) = grads.keys().find(|k| !params.iter().any(|p| &p.name == *k)) {
        return Err(TrainError::UnknownGradient(stray.clone()));
    }
    Ok(())
}

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &NamedGrads) -> f64 {
    grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// One decoupled-weight-decay Adam update at learning rate `lr`.
///
/// Weight decay touches only [`ParamKind::Weight`](crate::model::ParamKind) parameters.
pub fn adamw_step(state: &mut OptimState, grads: &NamedGrads, mut params: Vec<&mut Param>, lr: f64) -> Result<(), TrainError> {
    check_coverage(grads, &params)?;
    let cfg = state.config.clone();
    let clip = if cfg.clip_norm > 0.0 {
        let norm = grad_norm(grads);
        if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 }
    } else {
        1.0
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for p in params.iter_mut().filter(|p| p.requires_grad) {
        let g = &grads[&p.name];
        let m = state.first.entry(p.name.clone()).or_insert_with(|| Array::zeros(g.raw_dim()));
        let v = state.second.entry(p.name.clone()).or_insert_with(|| Array::zeros(g.raw_dim()));
        let decay = if p.kind.decays() { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        ndarray::Zip::from(&mut p.value).and(m).and(v).and(g).for_each(|w, m, v, &g| {
            let g = g * clip;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w = *w * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamKind;
    use ndarray::{ArrayD, IxDyn};

    fn scalar(name: &str, v: f64, kind: ParamKind) -> Param {
        Param::new(name, ArrayD::from_elem(IxDyn(&[1, 1]), v), kind)
    }

    fn grads(pairs: &[(&str, f64)]) -> NamedGrads {
        pairs.iter().map(|&(n, g)| (n.to_string(), ArrayD::from_elem(IxDyn(&[1, 1]), g))).collect()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar("w", 1.0, ParamKind::Weight);
        let mut st = OptimState::new(OptimConfig { lr: 0.1, weight_decay: 0.0, ..OptimConfig::default() });
        adamw_step(&mut st, &grads(&[("w", 1.0)]), vec![&mut p], 0.1).unwrap();
        assert!((p.value[[0, 0]] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = scalar("w", 0.3, ParamKind::Weight);
        let mut st = OptimState::new(OptimConfig { weight_decay: 0.0, ..OptimConfig::default() });
        for _ in 0..5 {
            adamw_step(&mut st, &grads(&[("w", 0.0)]), vec![&mut p], 0.1).unwrap();
        }
        assert_eq!(p.value[[0, 0]], 0.3);
    }

    #[test]
    fn decay_skips_non_weights() {
        let mut w = scalar("w", 2.0, ParamKind::Weight);
        let mut b = scalar("b", 2.0, ParamKind::Bias);
        let mut st = OptimState::new(OptimConfig { weight_decay: 0.5, ..OptimConfig::default() });
        adamw_step(&mut st, &grads(&[("w", 0.0), ("b", 0.0)]), vec![&mut w, &mut b], 0.1).unwrap();
        assert_eq!(w.value[[0, 0]], 2.0 * (1.0 - 0.05));
        assert_eq!(b.value[[0, 0]], 2.0);
    }

    #[test]
    fn coverage_errors() {
        let mut frozen = scalar("f", 1.0, ParamKind::Weight);
        frozen.requires_grad = false;
        let mut live = scalar("w", 1.0, ParamKind::Weight);
        let mut st = OptimState::new(OptimConfig::default());
        let err = adamw_step(&mut st, &grads(&[("f", 1.0), ("w", 1.0)]), vec![&mut frozen, &mut live], 0.1);
        assert!(matches!(err, Err(TrainError::FreezeBreach(n)) if n == "f"));
        let err = adamw_step(&mut st, &grads(&[]), vec![&mut live], 0.1);
        assert!(matches!(err, Err(TrainError::MissingGradient(n)) if n == "w"));
        let err = adamw_step(&mut st, &grads(&[("w", 1.0), ("x", 1.0)]), vec![&mut live], 0.1);
        assert!(matches!(err, Err(TrainError::UnknownGradient(n)) if n == "x"));
        assert_eq!(st.step, 0);
        assert!(st.first.is_empty());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut p = scalar("w", 0.0, ParamKind::Bias);
        let mut st = OptimState::new(OptimConfig { clip_norm: 1.0, ..OptimConfig::default() });
        adamw_step(&mut st, &grads(&[("w", 100.0)]), vec![&mut p], 0.1).unwrap();
        assert!((st.first["w"][[0, 0]] - 0.1).abs() < 1e-12);
    }
}
