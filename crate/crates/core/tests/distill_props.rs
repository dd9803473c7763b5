//! Mask, projector and loss invariants over random shapes.

use mdpd::distill::{
    apply_mask, bottleneck_project, loss_deep, loss_shallow, mask_from_uniform, BottleneckProjector, MaskVector,
};
use mdpd::model::Initializer;
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn mask(n: usize) -> impl Strategy<Value = MaskVector> {
    prop::collection::vec(0u8..2, n).prop_map(|m| MaskVector { m, lambda: 0.5 })
}

fn case() -> impl Strategy<Value = (Array2<f64>, Array2<f64>, MaskVector)> {
    (1usize..10, 1usize..7).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d), mask(n)))
}

proptest! {
    #[test]
    fn mask_threshold_is_strict(r in prop::collection::vec(0.0f64..1.0, 1..50), lambda in 0.0f64..=1.0) {
        let m = mask_from_uniform(&r, lambda).unwrap();
        for (ri, mi) in r.iter().zip(&m.m) {
            prop_assert_eq!(*mi == 1, *ri < lambda);
        }
    }

    #[test]
    fn masked_rows_take_the_token((aligned, _, m) in case(), seed in any::<u64>()) {
        let d = aligned.ncols();
        let token = Array2::from_shape_fn((1, d), |(_, j)| (seed % 97) as f64 + j as f64);
        let out = apply_mask(&aligned, &m, &token).unwrap();
        for (i, row) in out.rows().into_iter().enumerate() {
            let want = if m.m[i] == 1 { token.row(0) } else { aligned.row(i) };
            prop_assert!(row.iter().zip(want.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn deep_loss_sees_masked_rows_only((teacher, generated, m) in case(), junk in -1e6f64..1e6) {
        let base = loss_deep(&teacher, &generated, &m).unwrap();
        let (mut t2, mut g2) = (teacher.clone(), generated.clone());
        for i in (0..m.len()).filter(|&i| m.m[i] == 0) {
            t2.row_mut(i).fill(junk);
            g2.row_mut(i).fill(-junk);
        }
        prop_assert_eq!(base.to_bits(), loss_deep(&t2, &g2, &m).unwrap().to_bits());
        // Oracle: sum of squared residuals over masked rows.
        let oracle: f64 = (0..m.len())
            .filter(|&i| m.m[i] == 1)
            .map(|i| teacher.row(i).iter().zip(generated.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum();
        prop_assert!((base - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn full_mask_deep_loss_equals_shallow((teacher, generated, m) in case()) {
        let all = MaskVector { m: vec![1; m.len()], lambda: 1.0 };
        let deep = loss_deep(&teacher, &generated, &all).unwrap();
        let sha = loss_shallow(&teacher, &generated).unwrap();
        prop_assert!((deep - sha).abs() <= 1e-12 * sha.max(1.0));
    }

    #[test]
    fn projector_is_affine_in_its_input(d_in in 1usize..12, d_out in 1usize..12, rank in 1usize..5, seed in any::<u64>()) {
        let mut init = Initializer::new(seed);
        let proj = BottleneckProjector::new(&mut init, "p", d_in, d_out, rank).unwrap();
        prop_assert_eq!(proj.trainable_count(), (1 + d_in + d_out) * rank + d_out);
        let x = Array2::from_shape_fn((3, d_in), |(i, j)| (i as f64 - j as f64) * 0.3);
        let zero = Array2::<f64>::zeros((3, d_in));
        let y = bottleneck_project(&x, &proj).unwrap();
        let y0 = bottleneck_project(&zero, &proj).unwrap();
        let y2 = bottleneck_project(&(&x * 2.0), &proj).unwrap();
        // f(2x) − f(0) == 2·(f(x) − f(0)) for an affine map
        let lhs = &y2 - &y0;
        let rhs = (&y - &y0) * 2.0;
        prop_assert!(lhs.iter().zip(rhs.iter()).all(|(a, b)| (a - b).abs() <= 1e-9 * b.abs().max(1.0)));
        prop_assert_eq!(y.dim(), (3, d_out));
    }
}
