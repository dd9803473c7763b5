use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};

use super::DistillError;

/// Token-position mask shared by every deep layer within one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskVector {
    pub m: Vec<u8>,
    pub lambda: f64,
}

impl MaskVector {
    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.m.iter().filter(|&&v| v == 1).count()
    }

    /// `N×1` column of `m_i`.
    pub fn column(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.m.len(), 1), |(i, _)| f64::from(self.m[i]))
    }

    /// `N×1` column of `1 − m_i`.
    pub fn complement_column(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.m.len(), 1), |(i, _)| f64::from(1 - self.m[i]))
    }
}

fn check_lambda(lambda: f64) -> Result<(), DistillError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(DistillError::LambdaRange(lambda));
    }
    Ok(())
}

/// Thresholds given uniform draws: `m_i = 1` iff `r_i < λ`.
pub fn mask_from_uniform(r: &[f64], lambda: f64) -> Result<MaskVector, DistillError> {
    check_lambda(lambda)?;
    Ok(MaskVector { m: r.iter().map(|&ri| u8::from(ri < lambda)).collect(), lambda })
}

/// Draws `n` independent uniforms from `rng` and thresholds them at `λ`.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, lambda: f64, rng: &mut R) -> Result<MaskVector, DistillError> {
    check_lambda(lambda)?;
    let r: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    mask_from_uniform(&r, lambda)
}

/// Tape handles for one mask: `m` and `1 − m` as `N×1` constants.
#[derive(Clone, Copy, Debug)]
pub struct BoundMask {
    pub keep: Tensor,
    pub masked: Tensor,
    pub rows: usize,
}

impl BoundMask {
    pub fn new(tape: &mut Tape, mask: &MaskVector) -> Self {
        BoundMask {
            keep: tape.input(mask.complement_column().into_dyn()),
            masked: tape.input(mask.column().into_dyn()),
            rows: mask.len(),
        }
    }
}

/// Replaces masked rows of `aligned` with the `1×D_B` token: `s̄ = (1−m)⊙aligned + m·f_mask`.
pub fn apply_mask_node(tape: &mut Tape, aligned: Tensor, mask: &BoundMask, token: Tensor) -> Result<Tensor, DistillError> {
    let rows = tape.shape(aligned)?[0];
    if rows != mask.rows {
        return Err(DistillError::MaskLength { expected: rows, got: mask.rows });
    }
    let kept = tape.mul(aligned, mask.keep)?;
    let filled = tape.matmul(mask.masked, token)?;
    Ok(tape.add(kept, filled)?)
}

/// [`apply_mask_node`] on plain arrays.
pub fn apply_mask(aligned: &Array2<f64>, mask: &MaskVector, token: &Array2<f64>) -> Result<Array2<f64>, DistillError> {
    let mut tape = Tape::new();
    let a = tape.input(aligned.clone().into_dyn());
    let t = tape.input(token.clone().into_dyn());
    let bound = BoundMask::new(&mut tape, mask);
    let out = apply_mask_node(&mut tape, a, &bound, t)?;
    Ok(tape.value(out)?.view().into_dimensionality().expect("2-D").to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_rule() {
        let m = mask_from_uniform(&[0.2, 0.7, 0.4], 0.5).unwrap();
        assert_eq!(m.m, vec![1, 0, 1]);
    }

    #[test]
    fn boundary_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_mask(1000, 0.0, &mut rng).unwrap().masked_count(), 0);
        assert_eq!(sample_mask(1000, 1.0, &mut rng).unwrap().masked_count(), 1000);
    }

    #[test]
    fn rejects_out_of_range_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(sample_mask(4, 1.5, &mut rng), Err(DistillError::LambdaRange(_))));
        assert!(sample_mask(4, -0.1, &mut rng).is_err());
    }

    #[test]
    fn substitution_rule() {
        let aligned = array![[1.0, 2.0], [3.0, 4.0], [-5.0, 6.5]];
        let token = array![[9.0, -9.0]];
        let mask = MaskVector { m: vec![0, 1, 0], lambda: 0.5 };
        let out = apply_mask(&aligned, &mask, &token).unwrap();
        assert_eq!(out.row(0), aligned.row(0));
        assert_eq!(out.row(1), token.row(0));
        assert_eq!(out.row(2), aligned.row(2));

        let none = MaskVector { m: vec![0; 3], lambda: 0.0 };
        assert_eq!(apply_mask(&aligned, &none, &token).unwrap(), aligned);
        let all = MaskVector { m: vec![1; 3], lambda: 1.0 };
        assert!(apply_mask(&aligned, &all, &token).unwrap().rows().into_iter().all(|r| r == token.row(0)));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mask = MaskVector { m: vec![0, 1], lambda: 0.5 };
        let err = apply_mask(&Array2::zeros((3, 2)), &mask, &Array2::zeros((1, 2))).unwrap_err();
        assert!(matches!(err, DistillError::MaskLength { expected: 3, got: 2 }));
    }
}
