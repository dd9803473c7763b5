use std::collections::HashMap;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, Array, AutodiffError, Tape, Tensor};
use crate::distill::{DistillConfig, MaskVector};
use crate::model::{build_backbone, ArchSpec, MapBinder};
use crate::trainer::{derive_seed, record_objective, Mode, TransferModels};

use super::HarnessError;

/// Worst relative gradient error of one op.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub max_rel_error: f64,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

/// Values at least 0.05 away from zero, so relu kinks stay outside the stencil.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn readout(tape: &mut Tape, y: Tensor, target: &Array) -> Result<Tensor, AutodiffError> {
    let t = tape.input(target.clone());
    tape.mse_like(y, t)
}

fn run<F>(op: &str, f: F, point: &[Array], h: f64) -> Result<OpCheck, AutodiffError>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor, AutodiffError>,
{
    Ok(OpCheck { op: op.to_string(), max_rel_error: grad_check(f, point, h)? })
}

/// Central-difference check of every primitive op on small random inputs.
pub fn op_grad_checks(seed: u64, h: f64) -> Result<Vec<OpCheck>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k, m) = (4, 3, 5);
    let mut out = Vec::new();

    let (a, b, t) = (random(&mut rng, &[n, k]), random(&mut rng, &[k, m]), random(&mut rng, &[n, m]));
    out.push(run("matmul", |tape, p| {
        let y = tape.matmul(p[0], p[1])?;
        readout(tape, y, &t)
    }, &[a, b], h)?);

    let (a, b, t) = (random(&mut rng, &[n, k]), random(&mut rng, &[m, k]), random(&mut rng, &[n, m]));
    out.push(run("matmul_nt", |tape, p| {
        let y = tape.matmul_nt(p[0], p[1])?;
        readout(tape, y, &t)
    }, &[a, b], h)?);

    let (a, b, t) = (random(&mut rng, &[n, m]), random(&mut rng, &[1, m]), random(&mut rng, &[n, m]));
    out.push(run("add", |tape, p| {
        let y = tape.add(p[0], p[1])?;
        readout(tape, y, &t)
    }, &[a, b], h)?);

    let (a, b, t) = (random(&mut rng, &[n, m]), random(&mut rng, &[n, 1]), random(&mut rng, &[n, m]));
    out.push(run("mul", |tape, p| {
        let y = tape.mul(p[0], p[1])?;
        readout(tape, y, &t)
    }, &[a, b], h)?);

    let (x, t) = (off_kink(&mut rng, &[n, m]), random(&mut rng, &[n, m]));
    out.push(run("relu", |tape, p| {
        let y = tape.relu(p[0])?;
        readout(tape, y, &t)
    }, &[x], h)?);

    let (x, t) = (random(&mut rng, &[n, m]).mapv(|v| 3.0 * v), random(&mut rng, &[n, m]));
    out.push(run("softmax_rows", |tape, p| {
        let y = tape.softmax_rows(p[0])?;
        readout(tape, y, &t)
    }, &[x], h)?);

    let (x, g, b, t) = (random(&mut rng, &[n, m]), random(&mut rng, &[1, m]), random(&mut rng, &[1, m]), random(&mut rng, &[n, m]));
    out.push(run("layernorm", |tape, p| {
        let y = tape.layernorm(p[0], p[1], p[2])?;
        readout(tape, y, &t)
    }, &[x, g, b], h)?);

    let (x, w, b, t) = (random(&mut rng, &[n, k]), random(&mut rng, &[3 * k, m]), random(&mut rng, &[1, m]), random(&mut rng, &[n, m]));
    out.push(run("conv1d_k3", |tape, p| {
        let y = tape.conv1d_k3(p[0], p[1], p[2])?;
        readout(tape, y, &t)
    }, &[x, w, b], h)?);

    let (x, t) = (random(&mut rng, &[n, m]), random(&mut rng, &[1, m]));
    out.push(run("gap", |tape, p| {
        let y = tape.gap(p[0])?;
        readout(tape, y, &t)
    }, &[x], h)?);

    let (a, b) = (random(&mut rng, &[n, m]), random(&mut rng, &[n, m]));
    let w = ArrayD::from_shape_fn(IxDyn(&[n, 1]), |i| (i[0] % 2) as f64);
    out.push(run("mse_like", |tape, p| {
        let w = tape.input(w.clone());
        tape.mse_like_weighted(p[0], p[1], w)
    }, &[a, b], h)?);

    Ok(out)
}

/// Smallest architecture the objective check runs on.
pub fn grad_check_spec() -> ArchSpec {
    ArchSpec { layers: 2, tokens: 8, hidden: 16, reduction: 2, input_dim: 4, out_dim: 3, mlp_ratio: 2 }
}

/// Central-difference check of the full distillation objective with respect
/// to every trainable parameter, on two examples and a fixed mask.
pub fn objective_grad_check(spec: &ArchSpec, seed: u64, h: f64) -> Result<f64, HarnessError> {
    let backbone = build_backbone(spec, derive_seed(seed, 1))?;
    let mut cfg = DistillConfig::for_spec(spec);
    cfg.task_on_backbone = true;
    let mut models = TransferModels::new(backbone, Mode::Mdpd, cfg, seed)?;
    // Mask tokens start at zero; move them off so their gradient path is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    for p in models.params_mut() {
        if p.requires_grad && p.value.iter().all(|&v| v == 0.0) {
            p.value.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }

    let x = Array3::from_shape_fn((2, spec.tokens, spec.input_dim), |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..2).map(|i| i % spec.out_dim).collect();
    let mask = MaskVector { m: (0..spec.tokens).map(|t| (t % 3 == 0) as u8).collect(), lambda: 1.0 / 3.0 };

    let trainable: Vec<(String, Array)> =
        models.params().into_iter().filter(|p| p.requires_grad).map(|p| (p.name.clone(), p.value.clone())).collect();
    let names: Vec<String> = trainable.iter().map(|(n, _)| n.clone()).collect();
    let point: Vec<Array> = trainable.into_iter().map(|(_, v)| v).collect();

    grad_check(
        |tape, leaves| {
            let map: HashMap<String, Tensor> = names.iter().cloned().zip(leaves.iter().copied()).collect();
            let mut binder = MapBinder::new(map);
            Ok::<_, HarnessError>(record_objective(tape, &mut binder, &models, x.view(), &labels, Some(&mask))?.total)
        },
        &point,
        h,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        let checks = op_grad_checks(7, 1e-5).unwrap();
        assert_eq!(checks.len(), 10);
        for c in checks {
            assert!(c.max_rel_error < 1e-6, "{}: {}", c.op, c.max_rel_error);
        }
    }

    #[test]
    fn objective_gradients_match() {
        let err = objective_grad_check(&grad_check_spec(), 3, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
