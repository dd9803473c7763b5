use ndarray::Array2;

use crate::autodiff::{Tape, Tensor};
use crate::model::{Initializer, Param, ParamBinder, ParamKind};

use super::DistillError;

/// Low-rank map `x·M_down + c` then `·M_up + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckProjector {
    pub down: Param,
    pub inner_bias: Param,
    pub up: Param,
    pub bias: Param,
}

impl BottleneckProjector {
    pub fn new(init: &mut Initializer, name: &str, d_in: usize, d_out: usize, rank: usize) -> Result<Self, DistillError> {
        if rank == 0 || d_in == 0 || d_out == 0 {
            return Err(DistillError::InvalidConfig {
                field: "distill.rank",
                reason: format!("projector {d_in}→{d_out} with rank {rank} is empty"),
            });
        }
        Ok(BottleneckProjector {
            down: init.weight(format!("{name}.down"), d_in, rank, d_in),
            inner_bias: Initializer::zeros(format!("{name}.inner_bias"), 1, rank, ParamKind::Bias),
            up: init.weight(format!("{name}.up"), rank, d_out, rank),
            bias: Initializer::zeros(format!("{name}.bias"), 1, d_out, ParamKind::Bias),
        })
    }

    /// Square projector whose factors are identity matrices and whose biases are zero.
    pub fn identity(name: &str, width: usize) -> Self {
        let eye = Array2::<f64>::eye(width).into_dyn();
        BottleneckProjector {
            down: Param::new(format!("{name}.down"), eye.clone(), ParamKind::Weight),
            inner_bias: Initializer::zeros(format!("{name}.inner_bias"), 1, width, ParamKind::Bias),
            up: Param::new(format!("{name}.up"), eye, ParamKind::Weight),
            bias: Initializer::zeros(format!("{name}.bias"), 1, width, ParamKind::Bias),
        }
    }

    pub fn d_in(&self) -> usize {
        self.down.value.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.down.value.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.up.value.shape()[1]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.down, &self.inner_bias, &self.up, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.down, &mut self.inner_bias, &mut self.up, &mut self.bias]
    }

    pub fn trainable_count(&self) -> usize {
        self.params().iter().filter(|p| p.requires_grad).map(|p| p.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut dyn ParamBinder) -> BoundProjector {
        BoundProjector {
            down: binder.bind(tape, &self.down),
            inner_bias: binder.bind(tape, &self.inner_bias),
            up: binder.bind(tape, &self.up),
            bias: binder.bind(tape, &self.bias),
        }
    }
}

/// `(1 + D_in + D_out)·d + D_out`.
pub fn projector_param_count(d_in: usize, d_out: usize, rank: usize) -> usize {
    (1 + d_in + d_out) * rank + d_out
}

#[derive(Clone, Copy, Debug)]
pub struct BoundProjector {
    down: Tensor,
    inner_bias: Tensor,
    up: Tensor,
    bias: Tensor,
}

impl BoundProjector {
    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor, DistillError> {
        let h = tape.matmul(x, self.down)?;
        let h = tape.add(h, self.inner_bias)?;
        let y = tape.matmul(h, self.up)?;
        Ok(tape.add(y, self.bias)?)
    }
}

/// Applies `proj` to a plain `N×D_in` array.
pub fn bottleneck_project(x: &Array2<f64>, proj: &BottleneckProjector) -> Result<Array2<f64>, DistillError> {
    if x.ncols() != proj.d_in() {
        return Err(DistillError::Shape { what: "bottleneck_project input", expected: proj.d_in(), got: x.ncols() });
    }
    let mut tape = Tape::new();
    let bound = proj.bind(&mut tape, &mut crate::model::ConstBinder);
    let input = tape.input(x.clone().into_dyn());
    let y = bound.forward(&mut tape, input)?;
    Ok(tape.value(y)?.view().into_dimensionality().expect("2-D").to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_closed_form() {
        let mut init = Initializer::new(0);
        let p = BottleneckProjector::new(&mut init, "p", 384, 768, 64).unwrap();
        assert_eq!(p.trainable_count(), 74_560);
        assert_eq!(projector_param_count(384, 768, 64), 74_560);
    }

    #[test]
    fn zero_factors_give_broadcast_bias() {
        let mut init = Initializer::new(0);
        let mut p = BottleneckProjector::new(&mut init, "p", 3, 2, 1).unwrap();
        p.down.value.fill(0.0);
        p.up.value.fill(0.0);
        p.bias.value = ndarray::array![[0.5, -1.0]].into_dyn();
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64);
        let y = bottleneck_project(&x, &p).unwrap();
        for row in y.rows() {
            assert_eq!(row.to_vec(), vec![0.5, -1.0]);
        }
    }

    #[test]
    fn identity_projector_is_identity() {
        let p = BottleneckProjector::identity("l", 3);
        let x = ndarray::array![[1.0, -2.0, 3.5]];
        assert_eq!(bottleneck_project(&x, &p).unwrap(), x);
    }

    #[test]
    fn rejects_wrong_width() {
        let mut init = Initializer::new(0);
        let p = BottleneckProjector::new(&mut init, "p", 3, 2, 1).unwrap();
        assert!(bottleneck_project(&Array2::zeros((2, 4)), &p).is_err());
    }
}
