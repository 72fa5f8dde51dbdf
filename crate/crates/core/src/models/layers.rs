use rand::Rng;

use crate::error::Result;
use crate::tensor::{HasParams, Parameter, Tape, Tensor, Var};

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Uniform in `±sqrt(6 / fan_in)`, zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Linear {
            weight: Parameter::new(
                format!("{name}.weight"),
                Tensor::uniform(&[fan_in, fan_out], bound, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    /// Square identity map with zero bias.
    pub fn identity(name: &str, dim: usize) -> Self {
        let mut w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        Linear {
            weight: Parameter::new(format!("{name}.weight"), w),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let z = tape.matmul(x, w)?;
        tape.add_row(z, b)
    }
}

impl HasParams for Linear {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// One ReLU hidden layer followed by a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Mlp {
            hidden: Linear::he_uniform(&format!("{name}.hidden"), input, hidden, rng),
            out: Linear::he_uniform(&format!("{name}.out"), hidden, output, rng),
        }
    }

    /// Identity on non-negative inputs.
    pub fn identity(name: &str, dim: usize) -> Self {
        Mlp {
            hidden: Linear::identity(&format!("{name}.hidden"), dim),
            out: Linear::identity(&format!("{name}.out"), dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.out.out_dim()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, h)
    }
}

impl HasParams for Mlp {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.hidden.params();
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.hidden.params_mut();
        v.extend(self.out.params_mut());
        v
    }
}
