use ndarray::Array2;

use crate::autodiff::{Tape, Tensor};
use crate::model::{Initializer, Param, ParamBinder, ParamKind};

use super::DistillError;

/// `conv1d_k3 → relu → conv1d_k3` along the token axis at constant width.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationBlock {
    pub conv1: Param,
    pub bias1: Param,
    pub conv2: Param,
    pub bias2: Param,
}

impl GenerationBlock {
    pub fn new(init: &mut Initializer, name: &str, width: usize) -> Self {
        GenerationBlock {
            conv1: init.weight(format!("{name}.conv1.kernel"), 3 * width, width, 3 * width),
            bias1: Initializer::zeros(format!("{name}.conv1.bias"), 1, width, ParamKind::Bias),
            conv2: init.weight(format!("{name}.conv2.kernel"), 3 * width, width, 3 * width),
            bias2: Initializer::zeros(format!("{name}.conv2.bias"), 1, width, ParamKind::Bias),
        }
    }

    /// Both kernels pass the centre tap straight through.
    pub fn identity(name: &str, width: usize) -> Self {
        let mut kernel = Array2::<f64>::zeros((3 * width, width));
        for c in 0..width {
            kernel[[width + c, c]] = 1.0;
        }
        GenerationBlock {
            conv1: Param::new(format!("{name}.conv1.kernel"), kernel.clone().into_dyn(), ParamKind::Weight),
            bias1: Initializer::zeros(format!("{name}.conv1.bias"), 1, width, ParamKind::Bias),
            conv2: Param::new(format!("{name}.conv2.kernel"), kernel.into_dyn(), ParamKind::Weight),
            bias2: Initializer::zeros(format!("{name}.conv2.bias"), 1, width, ParamKind::Bias),
        }
    }

    pub fn width(&self) -> usize {
        self.conv1.value.shape()[1]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.conv1, &self.bias1, &self.conv2, &self.bias2]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.conv1, &mut self.bias1, &mut self.conv2, &mut self.bias2]
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut dyn ParamBinder) -> BoundGeneration {
        BoundGeneration {
            conv1: binder.bind(tape, &self.conv1),
            bias1: binder.bind(tape, &self.bias1),
            conv2: binder.bind(tape, &self.conv2),
            bias2: binder.bind(tape, &self.bias2),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGeneration {
    conv1: Tensor,
    bias1: Tensor,
    conv2: Tensor,
    bias2: Tensor,
}

impl BoundGeneration {
    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor, DistillError> {
        let h = tape.conv1d_k3(x, self.conv1, self.bias1)?;
        let h = tape.relu(h)?;
        Ok(tape.conv1d_k3(h, self.conv2, self.bias2)?)
    }
}

pub fn generate(x: &Array2<f64>, block: &GenerationBlock) -> Result<Array2<f64>, DistillError> {
    if x.ncols() != block.width() {
        return Err(DistillError::Shape { what: "generation block input", expected: block.width(), got: x.ncols() });
    }
    let mut tape = Tape::new();
    let bound = block.bind(&mut tape, &mut crate::model::ConstBinder);
    let input = tape.input(x.clone().into_dyn());
    let y = bound.forward(&mut tape, input)?;
    Ok(tape.value(y)?.view().into_dimensionality().expect("2-D").to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_block_passes_positive_input() {
        let block = GenerationBlock::identity("g", 3);
        let x = Array2::from_shape_fn((5, 3), |(i, j)| 0.5 + (i * 3 + j) as f64);
        assert_eq!(generate(&x, &block).unwrap(), x);
    }

    #[test]
    fn preserves_shape() {
        let mut init = Initializer::new(9);
        let block = GenerationBlock::new(&mut init, "g", 4);
        let x = Array2::from_shape_fn((7, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        assert_eq!(generate(&x, &block).unwrap().dim(), (7, 4));
    }
}
