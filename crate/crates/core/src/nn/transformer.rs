use rand::Rng;

use super::{prefixed, LayerNorm, Linear, Module};
use crate::autodiff::{Param, Tape, Var};

/// Multi-head self-attention where position `i` attends to positions `≤ i`.
#[derive(Clone, Debug)]
pub struct CausalSelfAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
}

impl CausalSelfAttention {
    pub fn new<R: Rng + ?Sized>(width: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        Self {
            heads,
            query: Linear::new(width, width, rng),
            key: Linear::new(width, width, rng),
            value: Linear::new(width, width, rng),
            proj: Linear::new(width, width, rng),
        }
    }

    fn split_heads(&self, tape: &mut Tape, x: Var, b: usize, s: usize, width: usize) -> Var {
        let per_head = width / self.heads;
        let x = tape.reshape(x, &[b, s, self.heads, per_head]);
        tape.permute(x, &[0, 2, 1, 3])
    }

    /// `(B, S, width) -> (B, S, width)`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let shape = tape.shape(x).to_vec();
        let (b, s, width) = (shape[0], shape[1], shape[2]);
        let q = self.query.forward(tape, x);
        let k = self.key.forward(tape, x);
        let v = self.value.forward(tape, x);
        let q = self.split_heads(tape, q, b, s, width);
        let k = self.split_heads(tape, k, b, s, width);
        let v = self.split_heads(tape, v, b, s, width);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, 1.0 / ((width / self.heads) as f64).sqrt());
        let attn = tape.softmax(scores, true);
        let out = tape.matmul(attn, v);
        let out = tape.permute(out, &[0, 2, 1, 3]);
        let out = tape.reshape(out, &[b, s, width]);
        self.proj.forward(tape, out)
    }
}

impl Module for CausalSelfAttention {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = prefixed("query", self.query.named_params());
        out.extend(prefixed("key", self.key.named_params()));
        out.extend(prefixed("value", self.value.named_params()));
        out.extend(prefixed("proj", self.proj.named_params()));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = prefixed("query", self.query.named_params_mut());
        out.extend(prefixed("key", self.key.named_params_mut()));
        out.extend(prefixed("value", self.value.named_params_mut()));
        out.extend(prefixed("proj", self.proj.named_params_mut()));
        out
    }
}

/// Pre-norm decoder block: `x + attn(ln(x))`, then `x + ff(ln(x))` with a
/// two-layer ReLU feed-forward.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: CausalSelfAttention,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(width: usize, heads: usize, ff_width: usize, rng: &mut R) -> Self {
        Self {
            norm1: LayerNorm::new(width),
            attn: CausalSelfAttention::new(width, heads, rng),
            norm2: LayerNorm::new(width),
            ff1: Linear::new(width, ff_width, rng),
            ff2: Linear::new(ff_width, width, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.norm1.forward(tape, x);
        let h = self.attn.forward(tape, h);
        let x = tape.add(x, h);
        let h = self.norm2.forward(tape, x);
        let h = self.ff1.forward(tape, h);
        let h = tape.relu(h);
        let h = self.ff2.forward(tape, h);
        tape.add(x, h)
    }
}

impl Module for TransformerBlock {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = prefixed("norm1", self.norm1.named_params());
        out.extend(prefixed("attn", self.attn.named_params()));
        out.extend(prefixed("norm2", self.norm2.named_params()));
        out.extend(prefixed("ff1", self.ff1.named_params()));
        out.extend(prefixed("ff2", self.ff2.named_params()));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = prefixed("norm1", self.norm1.named_params_mut());
        out.extend(prefixed("attn", self.attn.named_params_mut()));
        out.extend(prefixed("norm2", self.norm2.named_params_mut()));
        out.extend(prefixed("ff1", self.ff1.named_params_mut()));
        out.extend(prefixed("ff2", self.ff2.named_params_mut()));
        out
    }
}

/// Runs `emb: (B, S, width)` through the blocks and projects to vocabulary
/// logits `(B, S, vocab)`.
pub fn transformer_forward(tape: &mut Tape, emb: Var, blocks: &[TransformerBlock], head: &Linear) -> Var {
    let mut x = emb;
    for block in blocks {
        x = block.forward(tape, x);
    }
    head.forward(tape, x)
}
