use rand::Rng;

use super::{prefixed, Conv1d, Module, ResNetStack, RESNET_DEPTH, RESNET_DILATION_GROWTH};
use crate::autodiff::{ConvSpec, Param, Tape, Var};
use crate::error::{Error, Result};

fn same3() -> ConvSpec {
    ConvSpec::symmetric(3, 1, 1, 1)
}

/// Temporal encoder: `conv3 → relu → T × (stride-2 conv4 → resnet) → conv3`,
/// mapping `(B, L, d)` to `(B, L/2^T, d_c)`.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub input: Conv1d,
    pub stages: Vec<(Conv1d, ResNetStack)>,
    pub output: Conv1d,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        hidden: usize,
        code_dim: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let input = Conv1d::new(channels, hidden, same3(), rng);
        let stages = (0..depth)
            .map(|_| {
                (
                    Conv1d::new(hidden, hidden, ConvSpec::symmetric(4, 2, 1, 1), rng),
                    ResNetStack::new(hidden, RESNET_DEPTH, RESNET_DILATION_GROWTH, rng),
                )
            })
            .collect();
        let output = Conv1d::new(hidden, code_dim, same3(), rng);
        Self {
            input,
            stages,
            output,
        }
    }

    /// Number of halvings `T`.
    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn in_channels(&self) -> usize {
        self.input.in_channels
    }

    pub fn code_dim(&self) -> usize {
        self.output.out_channels
    }

    /// Checks the input length before recording anything on the tape.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.in_channels() {
            return Err(Error::shape(
                "encoder",
                format!("expected (B, L, {}), got {shape:?}", self.in_channels()),
            ));
        }
        let factor = 1usize << self.depth();
        if shape[1] == 0 || shape[1] % factor != 0 {
            return Err(Error::Config(format!(
                "sequence length {} is not divisible by 2^{} = {factor}",
                shape[1],
                self.depth()
            )));
        }
        let mut h = self.input.forward(tape, x);
        h = tape.relu(h);
        for (down, res) in &self.stages {
            h = down.forward(tape, h);
            h = res.forward(tape, h);
        }
        Ok(self.output.forward(tape, h))
    }
}

impl Module for Encoder {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = prefixed("input", self.input.named_params());
        for (i, (down, res)) in self.stages.iter().enumerate() {
            out.extend(prefixed(&format!("stage{i}.down"), down.named_params()));
            out.extend(prefixed(&format!("stage{i}.res"), res.named_params()));
        }
        out.extend(prefixed("output", self.output.named_params()));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = prefixed("input", self.input.named_params_mut());
        for (i, (down, res)) in self.stages.iter_mut().enumerate() {
            out.extend(prefixed(&format!("stage{i}.down"), down.named_params_mut()));
            out.extend(prefixed(&format!("stage{i}.res"), res.named_params_mut()));
        }
        out.extend(prefixed("output", self.output.named_params_mut()));
        out
    }
}

/// Temporal decoder: `conv3 → relu → T × (resnet → 2× nearest upsample → conv3)
/// → conv3 → relu → conv3`, mapping `(B, L/2^T, d_c)` to `(B, L, d)`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub input: Conv1d,
    pub stages: Vec<(ResNetStack, Conv1d)>,
    pub mid: Conv1d,
    pub output: Conv1d,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        code_dim: usize,
        hidden: usize,
        channels: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let input = Conv1d::new(code_dim, hidden, same3(), rng);
        let stages = (0..depth)
            .map(|_| {
                (
                    ResNetStack::new(hidden, RESNET_DEPTH, RESNET_DILATION_GROWTH, rng),
                    Conv1d::new(hidden, hidden, same3(), rng),
                )
            })
            .collect();
        let mid = Conv1d::new(hidden, hidden, same3(), rng);
        let output = Conv1d::new(hidden, channels, same3(), rng);
        Self {
            input,
            stages,
            mid,
            output,
        }
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn code_dim(&self) -> usize {
        self.input.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.output.out_channels
    }

    pub fn forward(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 3 || shape[2] != self.code_dim() || shape[1] == 0 {
            return Err(Error::shape(
                "decoder",
                format!("expected (B, L, {}), got {shape:?}", self.code_dim()),
            ));
        }
        let mut x = self.input.forward(tape, h);
        x = tape.relu(x);
        for (res, conv) in &self.stages {
            x = res.forward(tape, x);
            x = tape.upsample_nearest(x, 2);
            x = conv.forward(tape, x);
        }
        x = self.mid.forward(tape, x);
        x = tape.relu(x);
        Ok(self.output.forward(tape, x))
    }
}

impl Module for Decoder {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = prefixed("input", self.input.named_params());
        for (i, (res, conv)) in self.stages.iter().enumerate() {
            out.extend(prefixed(&format!("stage{i}.res"), res.named_params()));
            out.extend(prefixed(&format!("stage{i}.conv"), conv.named_params()));
        }
        out.extend(prefixed("mid", self.mid.named_params()));
        out.extend(prefixed("output", self.output.named_params()));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = prefixed("input", self.input.named_params_mut());
        for (i, (res, conv)) in self.stages.iter_mut().enumerate() {
            out.extend(prefixed(&format!("stage{i}.res"), res.named_params_mut()));
            out.extend(prefixed(&format!("stage{i}.conv"), conv.named_params_mut()));
        }
        out.extend(prefixed("mid", self.mid.named_params_mut()));
        out.extend(prefixed("output", self.output.named_params_mut()));
        out
    }
}
