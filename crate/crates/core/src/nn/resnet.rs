use rand::Rng;

use super::{prefixed, Conv1d, LayerNorm, Module};
use crate::autodiff::{ConvSpec, Param, Tape, Var};

pub const RESNET_DEPTH: usize = 3;
pub const RESNET_DILATION_GROWTH: usize = 3;

/// `x + conv1x1(relu(ln(conv3_dilated(relu(ln(x))))))`; shape preserving.
#[derive(Clone, Debug)]
pub struct ResNetBlock {
    pub dilation: usize,
    pub norm1: LayerNorm,
    pub conv1: Conv1d,
    pub norm2: LayerNorm,
    pub conv2: Conv1d,
}

impl ResNetBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, dilation: usize, rng: &mut R) -> Self {
        Self {
            dilation,
            norm1: LayerNorm::new(channels),
            conv1: Conv1d::new(
                channels,
                channels,
                ConvSpec::symmetric(3, 1, dilation, dilation),
                rng,
            ),
            norm2: LayerNorm::new(channels),
            conv2: Conv1d::new(channels, channels, ConvSpec::symmetric(1, 1, 0, 1), rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.norm1.forward(tape, x);
        let h = tape.relu(h);
        let h = self.conv1.forward(tape, h);
        let h = self.norm2.forward(tape, h);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h);
        tape.add(x, h)
    }
}

impl Module for ResNetBlock {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = prefixed("norm1", self.norm1.named_params());
        out.extend(prefixed("conv1", self.conv1.named_params()));
        out.extend(prefixed("norm2", self.norm2.named_params()));
        out.extend(prefixed("conv2", self.conv2.named_params()));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = prefixed("norm1", self.norm1.named_params_mut());
        out.extend(prefixed("conv1", self.conv1.named_params_mut()));
        out.extend(prefixed("norm2", self.norm2.named_params_mut()));
        out.extend(prefixed("conv2", self.conv2.named_params_mut()));
        out
    }
}

/// Blocks with dilations `1, g, g², …`.
#[derive(Clone, Debug)]
pub struct ResNetStack {
    pub blocks: Vec<ResNetBlock>,
}

impl ResNetStack {
    pub fn new<R: Rng + ?Sized>(channels: usize, depth: usize, growth: usize, rng: &mut R) -> Self {
        let mut dilation = 1;
        let mut blocks = Vec::with_capacity(depth);
        for _ in 0..depth {
            blocks.push(ResNetBlock::new(channels, dilation, rng));
            dilation *= growth;
        }
        Self { blocks }
    }

    pub fn forward(&self, tape: &mut Tape, mut x: Var) -> Var {
        for b in &self.blocks {
            x = b.forward(tape, x);
        }
        x
    }
}

impl Module for ResNetStack {
    fn named_params(&self) -> Vec<(String, &Param)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| prefixed(&format!("block{i}"), b.named_params()))
            .collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| prefixed(&format!("block{i}"), b.named_params_mut()))
            .collect()
    }
}
