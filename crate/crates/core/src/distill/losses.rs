//! Squared-error loss terms. Each `*_node` form records on a tape and returns a
//! one-element tensor; the plain forms evaluate the same graph on arrays.

use ndarray::Array2;

use crate::autodiff::{Tape, Tensor};
use crate::model::ConstBinder;

use super::mask::{BoundMask, MaskVector};
use super::projector::BottleneckProjector;
use super::DistillError;

fn check_same(what: &'static str, tape: &Tape, a: Tensor, b: Tensor) -> Result<(), DistillError> {
    let (sa, sb) = (tape.shape(a)?, tape.shape(b)?);
    if sa != sb {
        return Err(DistillError::ShapePair { what, lhs: sa.to_vec(), rhs: sb.to_vec() });
    }
    Ok(())
}

/// `Σ_ij (b_ij − φ(s)_ij)²` with `teacher` already detached.
pub fn loss_shallow_node(tape: &mut Tape, teacher: Tensor, aligned: Tensor) -> Result<Tensor, DistillError> {
    check_same("loss_shallow", tape, teacher, aligned)?;
    Ok(tape.mse_like(teacher, aligned)?)
}

/// `Σ_ij m_i (b_ij − G(s̄)_ij)²` with `teacher` already detached.
pub fn loss_deep_node(tape: &mut Tape, teacher: Tensor, generated: Tensor, mask: &BoundMask) -> Result<Tensor, DistillError> {
    check_same("loss_deep", tape, teacher, generated)?;
    let rows = tape.shape(teacher)?[0];
    if rows != mask.rows {
        return Err(DistillError::MaskLength { expected: rows, got: mask.rows });
    }
    Ok(tape.mse_like_weighted(teacher, generated, mask.masked)?)
}

/// `Σ_i (Y^S_i − φ_logit(Y^B)_i)²` with `teacher` (the side logits) already detached.
pub fn loss_logits_node(tape: &mut Tape, teacher: Tensor, projected: Tensor) -> Result<Tensor, DistillError> {
    check_same("loss_logits", tape, teacher, projected)?;
    Ok(tape.mse_like(teacher, projected)?)
}

/// Squared error between `softmax(logits)` and the one-hot label.
pub fn task_loss_node(tape: &mut Tape, logits: Tensor, label: usize) -> Result<Tensor, DistillError> {
    let classes = tape.shape(logits)?[1];
    if label >= classes {
        return Err(DistillError::Label { label, classes });
    }
    let probs = tape.softmax_rows(logits)?;
    let mut onehot = Array2::<f64>::zeros((1, classes));
    onehot[[0, label]] = 1.0;
    let target = tape.input(onehot.into_dyn());
    Ok(tape.mse_like(target, probs)?)
}

pub fn loss_shallow(teacher: &Array2<f64>, aligned: &Array2<f64>) -> Result<f64, DistillError> {
    let mut tape = Tape::new();
    let b = tape.input(teacher.clone().into_dyn());
    let s = tape.input(aligned.clone().into_dyn());
    let l = loss_shallow_node(&mut tape, b, s)?;
    Ok(tape.scalar(l)?)
}

pub fn loss_deep(teacher: &Array2<f64>, generated: &Array2<f64>, mask: &MaskVector) -> Result<f64, DistillError> {
    let mut tape = Tape::new();
    let b = tape.input(teacher.clone().into_dyn());
    let g = tape.input(generated.clone().into_dyn());
    let m = BoundMask::new(&mut tape, mask);
    let l = loss_deep_node(&mut tape, b, g, &m)?;
    Ok(tape.scalar(l)?)
}

pub fn loss_logits(side_logits: &[f64], backbone_logits: &[f64], proj: &BottleneckProjector) -> Result<f64, DistillError> {
    let mut tape = Tape::new();
    let ys = tape.input(Array2::from_shape_vec((1, side_logits.len()), side_logits.to_vec()).expect("row").into_dyn());
    let yb = tape.input(Array2::from_shape_vec((1, backbone_logits.len()), backbone_logits.to_vec()).expect("row").into_dyn());
    let bound = proj.bind(&mut tape, &mut ConstBinder);
    let projected = bound.forward(&mut tape, yb)?;
    let l = loss_logits_node(&mut tape, ys, projected)?;
    Ok(tape.scalar(l)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn shallow_cases() {
        assert_eq!(loss_shallow(&Array2::ones((2, 2)), &Array2::zeros((2, 2))).unwrap(), 4.0);
        let x = array![[1.5, -2.0], [0.25, 3.0]];
        assert_eq!(loss_shallow(&x, &x).unwrap(), 0.0);
        assert!(loss_shallow(&Array2::zeros((2, 2)), &Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn deep_counts_masked_rows_only() {
        let b = array![[1.0, 1.0], [5.0, 5.0]];
        let g = Array2::zeros((2, 2));
        let mask = MaskVector { m: vec![1, 0], lambda: 0.5 };
        assert_eq!(loss_deep(&b, &g, &mask).unwrap(), 2.0);
        let none = MaskVector { m: vec![0, 0], lambda: 0.0 };
        assert_eq!(loss_deep(&b, &g, &none).unwrap(), 0.0);
    }

    #[test]
    fn logits_case() {
        let proj = BottleneckProjector::identity("l", 2);
        assert_eq!(loss_logits(&[1.0, 2.0], &[0.0, 0.0], &proj).unwrap(), 5.0);
        assert_eq!(loss_logits(&[1.0, 2.0], &[1.0, 2.0], &proj).unwrap(), 0.0);
    }

    #[test]
    fn task_loss_matches_brier_score() {
        let mut tape = Tape::new();
        let y = tape.input(array![[0.0, 0.0]].into_dyn());
        let l = task_loss_node(&mut tape, y, 1).unwrap();
        assert_eq!(tape.scalar(l).unwrap(), 0.5);
        let y = tape.input(array![[0.0, 0.0]].into_dyn());
        assert!(matches!(task_loss_node(&mut tape, y, 2), Err(DistillError::Label { .. })));
    }
}
