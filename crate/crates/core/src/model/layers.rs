use crate::autodiff::{AutodiffError, Tape, Tensor};

use super::param::{Initializer, Param, ParamBinder, ParamKind};

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(init: &mut Initializer, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Linear {
            weight: init.weight(format!("{name}.weight"), fan_in, fan_out, fan_in),
            bias: bias.then(|| Initializer::zeros(format!("{name}.bias"), 1, fan_out, ParamKind::Bias)),
        }
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut dyn ParamBinder) -> BoundLinear {
        BoundLinear {
            weight: binder.bind(tape, &self.weight),
            bias: self.bias.as_ref().map(|b| binder.bind(tape, b)),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor, AutodiffError> {
        let y = tape.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub scale: Param,
    pub shift: Param,
}

impl Norm {
    pub fn new(name: &str, width: usize) -> Self {
        Norm {
            scale: Initializer::ones(format!("{name}.scale"), 1, width, ParamKind::NormScale),
            shift: Initializer::zeros(format!("{name}.shift"), 1, width, ParamKind::NormShift),
        }
    }

    fn bind(&self, tape: &mut Tape, binder: &mut dyn ParamBinder) -> (Tensor, Tensor) {
        (binder.bind(tape, &self.scale), binder.bind(tape, &self.shift))
    }
}

/// Pre-layernorm transformer block with single-head attention and a relu MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub width: usize,
    pub norm1: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm2: Norm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl EncoderLayer {
    pub fn new(init: &mut Initializer, name: &str, width: usize, mlp_ratio: usize) -> Self {
        let hidden = width * mlp_ratio;
        EncoderLayer {
            width,
            norm1: Norm::new(&format!("{name}.norm1"), width),
            query: Linear::new(init, &format!("{name}.attn.query"), width, width, true),
            key: Linear::new(init, &format!("{name}.attn.key"), width, width, true),
            value: Linear::new(init, &format!("{name}.attn.value"), width, width, true),
            output: Linear::new(init, &format!("{name}.attn.output"), width, width, true),
            norm2: Norm::new(&format!("{name}.norm2"), width),
            mlp_in: Linear::new(init, &format!("{name}.mlp.in"), width, hidden, true),
            mlp_out: Linear::new(init, &format!("{name}.mlp.out"), hidden, width, true),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.norm1.scale, &self.norm1.shift];
        for l in [&self.query, &self.key, &self.value, &self.output] {
            v.extend(l.params());
        }
        v.push(&self.norm2.scale);
        v.push(&self.norm2.shift);
        v.extend(self.mlp_in.params());
        v.extend(self.mlp_out.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.norm1.scale, &mut self.norm1.shift];
        for l in [&mut self.query, &mut self.key, &mut self.value, &mut self.output] {
            v.extend(l.params_mut());
        }
        v.push(&mut self.norm2.scale);
        v.push(&mut self.norm2.shift);
        v.extend(self.mlp_in.params_mut());
        v.extend(self.mlp_out.params_mut());
        v
    }

    /// Scalars in the layer's matmul weights (biases and norms excluded).
    pub fn matmul_weight_count(&self) -> usize {
        [&self.query, &self.key, &self.value, &self.output, &self.mlp_in, &self.mlp_out]
            .iter()
            .map(|l| l.weight.numel())
            .sum()
    }

    pub fn bind(&self, tape: &mut Tape, binder: &mut dyn ParamBinder) -> BoundEncoderLayer {
        BoundEncoderLayer {
            width: self.width,
            norm1: self.norm1.bind(tape, binder),
            query: self.query.bind(tape, binder),
            key: self.key.bind(tape, binder),
            value: self.value.bind(tape, binder),
            output: self.output.bind(tape, binder),
            norm2: self.norm2.bind(tape, binder),
            mlp_in: self.mlp_in.bind(tape, binder),
            mlp_out: self.mlp_out.bind(tape, binder),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundEncoderLayer {
    width: usize,
    norm1: (Tensor, Tensor),
    query: BoundLinear,
    key: BoundLinear,
    value: BoundLinear,
    output: BoundLinear,
    norm2: (Tensor, Tensor),
    mlp_in: BoundLinear,
    mlp_out: BoundLinear,
}

impl BoundEncoderLayer {
    pub fn forward(&self, tape: &mut Tape, x: Tensor) -> Result<Tensor, AutodiffError> {
        let h = tape.layernorm(x, self.norm1.0, self.norm1.1)?;
        let q = self.query.forward(tape, h)?;
        let k = self.key.forward(tape, h)?;
        let v = self.value.forward(tape, h)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (self.width as f64).sqrt())?;
        let attn = tape.softmax_rows(scores)?;
        let mixed = tape.matmul(attn, v)?;
        let o = self.output.forward(tape, mixed)?;
        let x = tape.add(x, o)?;

        let h = tape.layernorm(x, self.norm2.0, self.norm2.1)?;
        let h = self.mlp_in.forward(tape, h)?;
        let h = tape.relu(h)?;
        let h = self.mlp_out.forward(tape, h)?;
        tape.add(x, h)
    }
}
