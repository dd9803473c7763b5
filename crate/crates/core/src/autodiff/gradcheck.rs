use super::ops::Array;
use super::{AutodiffError, Tape, Tensor};

/// Compares reverse-mode gradients of a scalar function with central
/// differences at `point`.
///
/// Returns `max |analytic − numeric| / max(1, |numeric|)` over every
/// coordinate of every input. `forward` must be deterministic; it is evaluated
/// twice at `point` and any bitwise difference is rejected. Detached values
/// are held at their values at `point`, so the numeric side differentiates
/// the same stop-gradient function as the reverse pass.
pub fn grad_check<F, E>(forward: F, point: &[Array], h: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor, E>,
    E: From<AutodiffError>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(AutodiffError::InvalidArgument(format!("finite-difference step must be positive, got {h}")).into());
    }

    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = point.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = forward(&mut tape, &leaves)?;
    let base = tape.scalar(loss)?;
    let pins = tape.detached_values();
    let grads = tape.backward(loss)?;

    let eval = |values: &[Array]| -> Result<f64, E> {
        let mut tape = Tape::new();
        tape.pin_detached(pins.clone());
        let leaves: Vec<Tensor> = values.iter().map(|v| tape.leaf(v.clone(), false)).collect();
        let out = forward(&mut tape, &leaves)?;
        Ok(tape.scalar(out)?)
    };

    let again = eval(point)?;
    if again.to_bits() != base.to_bits() {
        return Err(AutodiffError::NonDeterministic { first: base, second: again }.into());
    }

    let point: Vec<Array> = point.iter().map(|p| p.as_standard_layout().into_owned()).collect();
    let mut work = point.clone();
    let mut worst = 0.0f64;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(leaf)
            .map(|g| g.as_standard_layout().into_owned())
            .unwrap_or_else(|| Array::zeros(point[k].raw_dim()));
        for j in 0..point[k].len() {
            let orig = point[k].as_slice().expect("contiguous")[j];
            work[k].as_slice_mut().expect("contiguous")[j] = orig + h;
            let plus = eval(&work)?;
            work[k].as_slice_mut().expect("contiguous")[j] = orig - h;
            let minus = eval(&work)?;
            work[k].as_slice_mut().expect("contiguous")[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_slice().expect("contiguous")[j];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use std::cell::Cell;

    #[test]
    fn affine_map_is_exact() {
        // f(x, y) = 3x − 0.5y + 2 on single-element inputs
        let err = grad_check::<_, AutodiffError>(
            |tape, p| {
                let a = tape.scale(p[0], 3.0)?;
                let b = tape.scale(p[1], -0.5)?;
                let s = tape.add(a, b)?;
                let two = tape.input(array![2.0].into_dyn());
                tape.add(s, two)
            },
            &[array![1.25].into_dyn(), array![-4.0].into_dyn()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn quadratic_through_matmul() {
        let w = array![[0.3, -1.2], [2.0, 0.7], [-0.4, 0.1]].into_dyn();
        let x = array![[1.0, -2.0, 0.5]].into_dyn();
        let err = grad_check::<_, AutodiffError>(
            |tape, p| {
                let y = tape.matmul(p[0], p[1])?;
                let t = tape.input(Array2::from_elem((1, 2), 0.25).into_dyn());
                tape.mse_like(y, t)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn nondeterminism_is_detected() {
        let calls = Cell::new(0u32);
        let res = grad_check::<_, AutodiffError>(
            |tape, p| {
                calls.set(calls.get() + 1);
                let jitter = tape.input(array![calls.get() as f64].into_dyn());
                let y = tape.add(p[0], jitter)?;
                let z = tape.input(array![0.0].into_dyn());
                tape.mse_like(y, z)
            },
            &[array![1.0].into_dyn()],
            1e-5,
        );
        assert!(matches!(res, Err(AutodiffError::NonDeterministic { .. })));
    }

    #[test]
    fn rejects_bad_step() {
        let res = grad_check::<_, AutodiffError>(|tape, p| tape.mse_like(p[0], p[0]), &[array![1.0].into_dyn()], 0.0);
        assert!(matches!(res, Err(AutodiffError::InvalidArgument(_))));
    }

    #[test]
    fn detached_values_stay_constant() {
        // The reverse pass treats sg(x) as a constant, so the numeric side must too.
        let err = grad_check::<_, AutodiffError>(
            |tape, p| {
                let c = tape.detach(p[0])?;
                let y = tape.mul(p[0], c)?;
                let z = tape.input(array![[0.0, 0.0]].into_dyn());
                tape.mse_like(y, z)
            },
            &[array![[0.8, -1.5]].into_dyn()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
