use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{type_ids, TokenVocabulary};
use crate::autodiff::{Param, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{prefixed, Checkpoint, Embedding, LayerNorm, Linear, Module, TransformerBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    /// Model width `d_m`.
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            ff_width: 256,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.ff_width == 0 {
            return Err(Error::Config("transformer.d_model, heads and ff_width must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "transformer.d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TransformerConfig,
    vocab: TokenVocabulary,
    lengths: Vec<usize>,
}

/// Decoder-only transformer over the shared multi-scale vocabulary with
/// token, position and scale-type embeddings.
#[derive(Clone, Debug)]
pub struct ARTransformer {
    pub config: TransformerConfig,
    vocab: TokenVocabulary,
    lengths: Vec<usize>,
    /// `(V+1) × d_m`, the last row is BOS.
    pub token_emb: Embedding,
    /// `L × d_m`.
    pub pos_emb: Embedding,
    /// `(K+1) × d_m`, row 0 is BOS.
    pub type_emb: Embedding,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl ARTransformer {
    pub fn new<R: Rng + ?Sized>(
        config: TransformerConfig,
        vocab: TokenVocabulary,
        lengths: Vec<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if lengths.len() != vocab.num_scales() {
            return Err(Error::LengthMismatch {
                expected: vocab.num_scales(),
                actual: lengths.len(),
            });
        }
        if lengths.iter().any(|&l| l == 0) {
            return Err(Error::Config("every scale needs at least one token".into()));
        }
        let d = config.d_model;
        let total: usize = lengths.iter().sum();
        Ok(Self {
            token_emb: Embedding::new(vocab.total() + 1, d, rng),
            pos_emb: Embedding::new(total, d, rng),
            type_emb: Embedding::new(vocab.num_scales() + 1, d, rng),
            blocks: (0..config.layers)
                .map(|_| TransformerBlock::new(d, config.heads, config.ff_width, rng))
                .collect(),
            norm: LayerNorm::new(d),
            head: Linear::new(d, vocab.total(), rng),
            config,
            vocab,
            lengths,
        })
    }

    pub fn vocab(&self) -> &TokenVocabulary {
        &self.vocab
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// Full sequence length `L`, also the positional table size.
    pub fn max_len(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Logits `(B, S, V)` for `batch` input sequences stored back to back.
    pub fn forward(&self, tape: &mut Tape, inputs: &[usize], batch: usize) -> Result<Var> {
        if batch == 0 || inputs.len() % batch != 0 {
            return Err(Error::shape(
                "ar_forward",
                format!("{} tokens do not split into {batch} sequences", inputs.len()),
            ));
        }
        let s = inputs.len() / batch;
        if s > self.max_len() {
            return Err(Error::SequenceTooLong {
                len: s,
                max: self.max_len(),
            });
        }
        let positions: Vec<usize> = (0..s).collect();
        let types = &type_ids(&self.lengths)[..s];
        let tok = self.token_emb.forward(tape, inputs, &[batch, s])?;
        let pos = self.pos_emb.forward(tape, &positions, &[s])?;
        let typ = self.type_emb.forward(tape, types, &[s])?;
        let extra = tape.add(pos, typ);
        let mut x = tape.add(tok, extra);
        for block in &self.blocks {
            x = block.forward(tape, x);
        }
        let x = self.norm.forward(tape, x);
        Ok(self.head.forward(tape, x))
    }

    /// Inference-only logits for equal-length sequences.
    pub fn logits(&self, inputs: &[Vec<usize>]) -> Result<Tensor> {
        let flat: Vec<usize> = inputs.concat();
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &flat, inputs.len())?;
        Ok(tape.value(out).clone())
    }

    pub fn freeze(&mut self) {
        for p in self.params_mut() {
            p.requires_grad = false;
            p.grad = None;
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = Meta {
            config: self.config,
            vocab: self.vocab.clone(),
            lengths: self.lengths.clone(),
        };
        let mut ck = Checkpoint::new("transformer", serde_json::to_value(meta)?);
        ck.insert_module("model", self);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("transformer")?;
        let meta: Meta = serde_json::from_value(ck.meta.clone())?;
        let mut rng = crate::rng::seeded(0);
        let mut model = Self::new(meta.config, meta.vocab, meta.lengths, &mut rng)?;
        ck.load_module("model", &mut model)?;
        model.freeze();
        Ok(model)
    }
}

impl Module for ARTransformer {
    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = prefixed("token_emb", self.token_emb.named_params());
        out.extend(prefixed("pos_emb", self.pos_emb.named_params()));
        out.extend(prefixed("type_emb", self.type_emb.named_params()));
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(prefixed(&format!("block{i}"), b.named_params()));
        }
        out.extend(prefixed("norm", self.norm.named_params()));
        out.extend(prefixed("head", self.head.named_params()));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = prefixed("token_emb", self.token_emb.named_params_mut());
        out.extend(prefixed("pos_emb", self.pos_emb.named_params_mut()));
        out.extend(prefixed("type_emb", self.type_emb.named_params_mut()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(prefixed(&format!("block{i}"), b.named_params_mut()));
        }
        out.extend(prefixed("norm", self.norm.named_params_mut()));
        out.extend(prefixed("head", self.head.named_params_mut()));
        out
    }
}

/// Mean next-token negative log-likelihood of `labels` under `logits`.
pub fn ar_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}
