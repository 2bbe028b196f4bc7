use rand::Rng;

use super::{init_uniform, Module};
use crate::autodiff::{ConvSpec, Param, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: init_uniform(&[input, output], input, rng),
            bias: init_uniform(&[output], input, rng),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.dim(1)
    }

    /// `(…, in) -> (…, out)`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul(x, w);
        tape.add(y, b)
    }
}

impl Module for Linear {
    fn named_params(&self) -> Vec<(String, &Param)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

/// Channels-last 1D convolution layer.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub spec: ConvSpec,
    /// `(kernel·in_channels, out_channels)`
    pub weight: Param,
    pub bias: Param,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Self {
        let fan_in = spec.kernel * in_channels;
        Self {
            in_channels,
            out_channels,
            spec,
            weight: init_uniform(&[fan_in, out_channels], fan_in, rng),
            bias: init_uniform(&[out_channels], fan_in, rng),
        }
    }

    pub fn output_len(&self, len: usize) -> Option<usize> {
        self.spec.output_len(len)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.conv1d(x, w, self.spec);
        tape.add(y, b)
    }
}

impl Module for Conv1d {
    fn named_params(&self) -> Vec<(String, &Param)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

/// Layer normalization over the last dimension with learned affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-8;

    pub fn new(width: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[width], 1.0)),
            beta: Param::new(Tensor::zeros(&[width])),
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let n = tape.layer_norm(x, self.eps);
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        let y = tape.mul(n, g);
        tape.add(y, b)
    }
}

impl Module for LayerNorm {
    fn named_params(&self) -> Vec<(String, &Param)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![
            ("gamma".into(), &mut self.gamma),
            ("beta".into(), &mut self.beta),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub weight: Param,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            weight: init_uniform(&[rows, dim], dim, rng),
        }
    }

    pub fn rows(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.weight.value.dim(1)
    }

    /// Fails when any index is outside `[0, rows)`.
    pub fn forward(&self, tape: &mut Tape, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        let table = tape.param(&self.weight);
        tape.embedding(table, indices, index_shape)
    }
}

impl Module for Embedding {
    fn named_params(&self) -> Vec<(String, &Param)> {
        vec![("weight".into(), &self.weight)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("weight".into(), &mut self.weight)]
    }
}
