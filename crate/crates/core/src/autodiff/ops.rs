//! Forward and backward kernels for the recorded op set.
//!
//! Everything here is a pure function over arrays; the tape decides which
//! buffers to keep and feeds them back in during the reverse pass.

use ndarray::{s, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn};

use super::AutodiffError;

pub type Array = ArrayD<f64>;

pub const LAYERNORM_EPS: f64 = 1e-5;

pub(crate) fn as_2d<'a>(op: &'static str, a: &'a Array) -> Result<ArrayView2<'a, f64>, AutodiffError> {
    a.view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| AutodiffError::RankMismatch { op, expected: 2, shape: a.shape().to_vec() })
}

pub(crate) fn shape_err(op: &'static str, a: &Array, b: &Array) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

/// How the right operand of `add`/`mul` is spread over the left operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// `1×M` over every row of `N×M` (add only).
    Row,
    /// `N×1` over every column of `N×M` (mul only).
    Column,
    /// A single element over everything.
    Scalar,
}

pub(crate) fn add_broadcast(a: &Array, b: &Array) -> Result<Broadcast, AutodiffError> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.len() == 1 && b.ndim() <= a.ndim() {
        Ok(Broadcast::Scalar)
    } else if a.ndim() == 2 && b.ndim() == 2 && b.shape()[0] == 1 && b.shape()[1] == a.shape()[1] {
        Ok(Broadcast::Row)
    } else {
        Err(shape_err("add", a, b))
    }
}

pub(crate) fn mul_broadcast(a: &Array, b: &Array) -> Result<Broadcast, AutodiffError> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.len() == 1 && b.ndim() <= a.ndim() {
        Ok(Broadcast::Scalar)
    } else if a.ndim() == 2 && b.ndim() == 2 && b.shape()[1] == 1 && b.shape()[0] == a.shape()[0] {
        Ok(Broadcast::Column)
    } else {
        Err(shape_err("mul", a, b))
    }
}

/// Sums `grad` (shaped like the left operand) down to the right operand's shape.
pub(crate) fn reduce_to(grad: Array, target: &[usize], mode: Broadcast) -> Array {
    match mode {
        Broadcast::Same => grad,
        Broadcast::Scalar => ArrayD::from_elem(IxDyn(target), grad.sum()),
        Broadcast::Row => grad.sum_axis(Axis(0)).insert_axis(Axis(0)),
        Broadcast::Column => grad.sum_axis(Axis(1)).insert_axis(Axis(1)),
    }
}

pub(crate) fn matmul(a: &Array, b: &Array, transpose_rhs: bool) -> Result<Array, AutodiffError> {
    let a2 = as_2d("matmul", a)?;
    let b2 = as_2d("matmul", b)?;
    let b2 = if transpose_rhs { b2.reversed_axes() } else { b2 };
    if a2.ncols() != b2.nrows() {
        return Err(shape_err("matmul", a, b));
    }
    Ok(a2.dot(&b2).into_dyn())
}

pub(crate) fn matmul_flops(a: &Array, out: &Array) -> u64 {
    // 2·N·K·M multiply-adds
    2 * (a.shape()[0] * a.shape()[1] * out.shape()[1]) as u64
}

pub(crate) fn relu(x: &Array) -> (Array, Array) {
    let y = x.mapv(|v| if v > 0.0 { v } else { 0.0 });
    let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
    (y, mask)
}

pub(crate) fn softmax_rows(x: &Array) -> Result<Array, AutodiffError> {
    let x2 = as_2d("softmax_rows", x)?;
    let mut y = x2.to_owned();
    for mut row in y.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(y.into_dyn())
}

pub(crate) fn softmax_rows_backward(y: &Array, g: &Array) -> Array {
    let y2 = y.view().into_dimensionality::<Ix2>().expect("softmax output is 2-D");
    let g2 = g.view().into_dimensionality::<Ix2>().expect("softmax grad is 2-D");
    let mut dx = Array2::<f64>::zeros(y2.raw_dim());
    for ((yr, gr), mut dr) in y2.rows().into_iter().zip(g2.rows()).zip(dx.rows_mut()) {
        let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr.iter()).zip(gr.iter()) {
            *d = yv * (gv - dot);
        }
    }
    dx.into_dyn()
}

pub(crate) struct LayerNormOut {
    pub y: Array,
    pub normalized: Array,
    pub rstd: Array,
}

pub(crate) fn layernorm(x: &Array, gamma: &Array, beta: &Array) -> Result<LayerNormOut, AutodiffError> {
    let x2 = as_2d("layernorm", x)?;
    let d = x2.ncols();
    let affine_ok = |p: &Array| p.ndim() == 2 && p.shape() == [1, d];
    if !affine_ok(gamma) {
        return Err(shape_err("layernorm", x, gamma));
    }
    if !affine_ok(beta) {
        return Err(shape_err("layernorm", x, beta));
    }
    let n = x2.nrows();
    let mut normalized = Array2::<f64>::zeros((n, d));
    let mut rstd = Array2::<f64>::zeros((n, 1));
    for (i, row) in x2.rows().into_iter().enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LAYERNORM_EPS).sqrt();
        rstd[[i, 0]] = r;
        for (o, v) in normalized.row_mut(i).iter_mut().zip(row.iter()) {
            *o = (v - mean) * r;
        }
    }
    let g2 = as_2d("layernorm", gamma)?;
    let b2 = as_2d("layernorm", beta)?;
    let y = &normalized * &g2 + b2;
    Ok(LayerNormOut { y: y.into_dyn(), normalized: normalized.into_dyn(), rstd: rstd.into_dyn() })
}

pub(crate) fn layernorm_backward_input(g: &Array, gamma: &Array, normalized: &Array, rstd: &Array) -> Array {
    let g2 = g.view().into_dimensionality::<Ix2>().expect("2-D");
    let gamma2 = gamma.view().into_dimensionality::<Ix2>().expect("2-D");
    let xh = normalized.view().into_dimensionality::<Ix2>().expect("2-D");
    let r = rstd.view().into_dimensionality::<Ix2>().expect("2-D");
    let d = g2.ncols() as f64;
    let gg = &g2 * &gamma2;
    let mut dx = Array2::<f64>::zeros(g2.raw_dim());
    for i in 0..gg.nrows() {
        let gr = gg.row(i);
        let xr = xh.row(i);
        let mean_g = gr.sum() / d;
        let mean_gx = gr.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        for j in 0..gg.ncols() {
            dx[[i, j]] = r[[i, 0]] * (gr[j] - mean_g - xr[j] * mean_gx);
        }
    }
    dx.into_dyn()
}

pub(crate) fn conv1d_k3(x: &Array, kernel: &Array, bias: &Array) -> Result<Array, AutodiffError> {
    let x2 = as_2d("conv1d_k3", x)?;
    let k2 = as_2d("conv1d_k3", kernel)?;
    let b2 = as_2d("conv1d_k3", bias)?;
    let (n, cin) = x2.dim();
    if k2.nrows() != 3 * cin {
        return Err(shape_err("conv1d_k3", x, kernel));
    }
    let cout = k2.ncols();
    if b2.dim() != (1, cout) {
        return Err(shape_err("conv1d_k3", kernel, bias));
    }
    let taps = kernel_taps(&k2, cin);
    let mut y = x2.dot(&taps[1]);
    if n > 1 {
        let prev = x2.slice(s![..n - 1, ..]).dot(&taps[0]);
        y.slice_mut(s![1.., ..]).scaled_add(1.0, &prev);
        let next = x2.slice(s![1.., ..]).dot(&taps[2]);
        y.slice_mut(s![..n - 1, ..]).scaled_add(1.0, &next);
    }
    y += &b2;
    Ok(y.into_dyn())
}

fn kernel_taps<'a>(k: &ArrayView2<'a, f64>, cin: usize) -> [ArrayView2<'a, f64>; 3] {
    [
        k.slice_move(s![0..cin, ..]),
        k.slice_move(s![cin..2 * cin, ..]),
        k.slice_move(s![2 * cin..3 * cin, ..]),
    ]
}

pub(crate) fn conv1d_k3_flops(x: &Array, kernel: &Array) -> u64 {
    2 * (x.shape()[0] * kernel.shape()[0] * kernel.shape()[1]) as u64
}

pub(crate) fn conv1d_k3_backward_input(g: &Array, kernel: &Array) -> Array {
    let g2 = g.view().into_dimensionality::<Ix2>().expect("2-D");
    let k2 = kernel.view().into_dimensionality::<Ix2>().expect("2-D");
    let cin = k2.nrows() / 3;
    let n = g2.nrows();
    let taps = kernel_taps(&k2, cin);
    let mut dx = g2.dot(&taps[1].t());
    if n > 1 {
        // y[i] used x[i-1] through tap 0 and x[i+1] through tap 2
        let from_next = g2.slice(s![1.., ..]).dot(&taps[0].t());
        dx.slice_mut(s![..n - 1, ..]).scaled_add(1.0, &from_next);
        let from_prev = g2.slice(s![..n - 1, ..]).dot(&taps[2].t());
        dx.slice_mut(s![1.., ..]).scaled_add(1.0, &from_prev);
    }
    dx.into_dyn()
}

pub(crate) fn conv1d_k3_backward_kernel(g: &Array, x: &Array) -> Array {
    let g2 = g.view().into_dimensionality::<Ix2>().expect("2-D");
    let x2 = x.view().into_dimensionality::<Ix2>().expect("2-D");
    let (n, cin) = x2.dim();
    let cout = g2.ncols();
    let mut dk = Array2::<f64>::zeros((3 * cin, cout));
    dk.slice_mut(s![cin..2 * cin, ..]).assign(&x2.t().dot(&g2));
    if n > 1 {
        dk.slice_mut(s![0..cin, ..]).assign(&x2.slice(s![..n - 1, ..]).t().dot(&g2.slice(s![1.., ..])));
        dk.slice_mut(s![2 * cin.., ..]).assign(&x2.slice(s![1.., ..]).t().dot(&g2.slice(s![..n - 1, ..])));
    }
    dk.into_dyn()
}

pub(crate) fn gap(x: &Array) -> Result<Array, AutodiffError> {
    let x2 = as_2d("gap", x)?;
    let n = x2.nrows() as f64;
    Ok((x2.sum_axis(Axis(0)) / n).insert_axis(Axis(0)).into_dyn())
}

pub(crate) fn gap_backward(g: &Array, rows: usize) -> Array {
    let g2 = g.view().into_dimensionality::<Ix2>().expect("2-D");
    let scale = 1.0 / rows as f64;
    let mut dx = Array2::<f64>::zeros((rows, g2.ncols()));
    for mut row in dx.rows_mut() {
        row.assign(&g2.row(0));
        row.mapv_inplace(|v| v * scale);
    }
    dx.into_dyn()
}

/// Residual `a - b` and the weighted squared sum `Σ_i w_i Σ_j r_ij²`.
pub(crate) fn mse_like(a: &Array, b: &Array, weights: Option<&Array>) -> Result<(Array, f64), AutodiffError> {
    if a.shape() != b.shape() {
        return Err(shape_err("mse_like", a, b));
    }
    let residual = a - b;
    let total = match weights {
        None => residual.iter().map(|r| r * r).sum(),
        Some(w) => {
            let r2 = as_2d("mse_like", &residual)?;
            if w.shape() != [r2.nrows(), 1] {
                return Err(shape_err("mse_like", a, w));
            }
            let mut total = 0.0;
            // Zero-weight rows are skipped outright so non-finite values there cannot leak in.
            for (row, &wi) in r2.rows().into_iter().zip(w.iter()).filter(|(_, &wi)| wi != 0.0) {
                total += wi * row.iter().map(|r| r * r).sum::<f64>();
            }
            total
        }
    };
    Ok((residual, total))
}

pub(crate) fn mse_like_backward(residual: &Array, weights: Option<&Array>, upstream: f64) -> Array {
    let mut d = residual.mapv(|r| 2.0 * r * upstream);
    if let Some(w) = weights {
        let w2 = w.view().into_dimensionality::<Ix2>().expect("2-D");
        let mut d2 = d.view_mut().into_dimensionality::<Ix2>().expect("2-D");
        for (mut row, &wi) in d2.rows_mut().into_iter().zip(w2.iter()) {
            if wi == 0.0 {
                row.fill(0.0);
            } else {
                row.mapv_inplace(|v| v * wi);
            }
        }
    }
    d
}
