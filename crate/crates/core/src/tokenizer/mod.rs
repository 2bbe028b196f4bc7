//! Multi-scale residual vector-quantized tokenizer.
//!
//! Scale `k` encodes the residual left by scales `1..k`, quantizes each
//! encoded frame to its most similar codebook entry and decodes it back to
//! the series domain; the reconstruction is the sum of all scale decodes.

mod codebook;
mod train;

pub use codebook::{Codebook, Similarity};
pub use train::{train_tokenizer, TokenizerTrainConfig, TrainHistory};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Decoder, Encoder, Module};

/// How codebook vectors are learned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookUpdate {
    /// Exponential moving average towards assigned encodings.
    #[default]
    Ema,
    /// Codebook treated as a trainable parameter (ablation).
    Gradient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Variables per time step, `d`.
    pub channels: usize,
    /// Window length `τ`.
    pub window: usize,
    /// Downsampling factor per scale, in scale order.
    pub factors: Vec<usize>,
    /// Codebook size per scale.
    pub vocab: Vec<usize>,
    pub code_dim: usize,
    /// Encoder/decoder hidden width `D`.
    pub hidden: usize,
    /// Embedding-loss weight.
    pub lambda: f64,
    /// EMA weight for codebook vectors and usage.
    pub beta: f64,
    pub usage_threshold: f64,
    /// L2-normalize encodings and codebook rows.
    pub unit_norm: bool,
    pub similarity: Similarity,
    pub codebook_update: CodebookUpdate,
    /// Enable codebook reset of under-used entries, including the
    /// data-driven initialization at the first step.
    pub reset: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            channels: 5,
            window: 24,
            factors: vec![2, 4],
            vocab: vec![512, 512],
            code_dim: 512,
            hidden: 64,
            lambda: 0.5,
            beta: 0.01,
            usage_threshold: 1.0,
            unit_norm: true,
            similarity: Similarity::InnerProduct,
            codebook_update: CodebookUpdate::Ema,
            reset: true,
        }
    }
}

impl TokenizerConfig {
    pub fn scales(&self) -> usize {
        self.factors.len()
    }

    /// Token count per scale, `τ / r^(k)`.
    pub fn token_lengths(&self) -> Vec<usize> {
        self.factors.iter().map(|r| self.window / r).collect()
    }

    /// Encoder halvings per scale, `log2 r^(k)`.
    pub fn depths(&self) -> Vec<usize> {
        self.factors.iter().map(|r| r.trailing_zeros() as usize).collect()
    }

    /// Whether `r^(k)` is non-increasing in `k`.
    pub fn is_coarse_to_fine(&self) -> bool {
        self.factors.windows(2).all(|w| w[1] <= w[0])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.factors.is_empty() {
            return bad("tokenizer.factors must name at least one scale".into());
        }
        if self.vocab.len() != self.factors.len() {
            return bad(format!(
                "tokenizer.vocab has {} entries but tokenizer.factors has {}",
                self.vocab.len(),
                self.factors.len()
            ));
        }
        if self.channels == 0 || self.window == 0 || self.code_dim == 0 || self.hidden == 0 {
            return bad("tokenizer.channels, window, code_dim and hidden must be positive".into());
        }
        for (k, &r) in self.factors.iter().enumerate() {
            if r == 0 || !r.is_power_of_two() {
                return bad(format!("tokenizer.factors[{k}] = {r} is not a power of two"));
            }
            if self.window % r != 0 {
                return bad(format!("tokenizer.window {} is not divisible by factors[{k}] = {r}", self.window));
            }
        }
        if !self.is_coarse_to_fine() {
            log::debug!(
                "tokenizer.factors {:?} grow with scale; scales run in the listed order",
                self.factors
            );
        }
        if let Some(k) = self.vocab.iter().position(|&v| v == 0) {
            return bad(format!("tokenizer.vocab[{k}] must be positive"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("tokenizer.beta = {} must lie in (0, 1)", self.beta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("tokenizer.lambda = {} must be finite and non-negative", self.lambda));
        }
        if !(self.usage_threshold >= 0.0) {
            return bad("tokenizer.usage_threshold must be non-negative".into());
        }
        Ok(())
    }
}

/// Encoder, decoder and codebook for one scale.
#[derive(Clone, Debug)]
pub struct ScaleModule {
    pub factor: usize,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub codebook: Codebook,
}

/// Tokens and per-scale reconstructions for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenization {
    /// `tokens[k]` has length `τ / r^(k)`.
    pub tokens: Vec<Vec<usize>>,
    /// `reconstructions[k]` is `f̃^(k)` with shape `(τ, d)`.
    pub reconstructions: Vec<Tensor>,
}

impl Tokenization {
    pub fn reconstruction(&self) -> Result<Tensor> {
        reconstruct(&self.reconstructions)
    }
}

/// Values recorded on a tape by one scale's forward pass.
pub(crate) struct ScaleForward {
    /// Encoder output after the normalization policy, `(B, L_k, d_c)`.
    pub h: Var,
    pub tokens: Vec<usize>,
    /// Dequantized codebook rows with the same shape as `h`.
    pub h_tilde: Tensor,
    /// Decoder output `(B, τ, d)`.
    pub f_tilde: Var,
}

#[derive(Clone, Debug)]
pub struct MultiScaleTokenizer {
    pub config: TokenizerConfig,
    pub scales: Vec<ScaleModule>,
}

/// `x̃ = Σ_k f̃^(k)`.
pub fn reconstruct(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("reconstruct", "no scale reconstructions"))?;
    let mut out = first.clone();
    for p in &parts[1..] {
        if p.shape() != out.shape() {
            return Err(Error::shape(
                "reconstruct",
                format!("{:?} vs {:?}", p.shape(), out.shape()),
            ));
        }
        out.add_assign(p);
    }
    Ok(out)
}

/// Records the training objective for a batch of `batch` windows:
/// per-window `‖x − x̃‖²` averaged over the batch, plus
/// `λ · Σ_k mean_i (1 − h_i · sg(h̃_i))`.
pub(crate) fn loss_on_tape(
    tape: &mut Tape,
    x: Var,
    x_tilde: Var,
    embeddings: &[(Var, &Tensor)],
    lambda: f64,
    batch: usize,
) -> (Var, Var, Var) {
    let diff = tape.sub(x, x_tilde);
    let sq = tape.mul(diff, diff);
    let total = tape.sum(sq);
    let recon = tape.scale(total, 1.0 / batch as f64);
    let mut emb: Option<Var> = None;
    for &(h, h_tilde) in embeddings {
        let width = *h_tilde.shape().last().expect("embedding rows");
        let target = tape.constant(h_tilde.clone());
        let prod = tape.mul(h, target);
        let mean = tape.mean(prod);
        let term = tape.scale(mean, -(width as f64));
        let term = tape.add_scalar(term, 1.0);
        emb = Some(match emb {
            Some(e) => tape.add(e, term),
            None => term,
        });
    }
    let emb = emb.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    let weighted = tape.scale(emb, lambda);
    let loss = tape.add(recon, weighted);
    (loss, recon, emb)
}

/// Training objective for one window: `x, x̃: (τ, d)` and per-scale
/// `(h, h̃): (L_k, d_c)` pairs.
pub fn tokenizer_loss(x: &Tensor, x_tilde: &Tensor, embeddings: &[(Tensor, Tensor)], lambda: f64) -> Result<f64> {
    if x.shape() != x_tilde.shape() {
        return Err(Error::shape("tokenizer_loss", format!("{:?} vs {:?}", x.shape(), x_tilde.shape())));
    }
    if let Some((h, ht)) = embeddings.iter().find(|(h, ht)| h.shape() != ht.shape()) {
        return Err(Error::shape("tokenizer_loss", format!("h {:?} vs h̃ {:?}", h.shape(), ht.shape())));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let xt = tape.constant(x_tilde.clone());
    let hs: Vec<(Var, &Tensor)> = embeddings
        .iter()
        .map(|(h, ht)| (tape.constant(h.clone()), ht))
        .collect();
    let (loss, _, _) = loss_on_tape(&mut tape, xv, xt, &hs, lambda, 1);
    Ok(tape.value(loss).item())
}

impl MultiScaleTokenizer {
    pub fn new<R: Rng + ?Sized>(config: TokenizerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let scales = config
            .factors
            .iter()
            .zip(config.depths())
            .zip(&config.vocab)
            .map(|((&factor, depth), &v)| ScaleModule {
                factor,
                encoder: Encoder::new(config.channels, config.hidden, config.code_dim, depth, rng),
                decoder: Decoder::new(config.code_dim, config.hidden, config.channels, depth, rng),
                codebook: Codebook::random(v, config.code_dim, config.unit_norm, rng),
            })
            .collect();
        Ok(Self { config, scales })
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn token_lengths(&self) -> Vec<usize> {
        self.config.token_lengths()
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.scales.iter().map(|s| s.codebook.size()).collect()
    }

    /// Encodes `f: (B, τ, d)` at scale `k`, quantizes and decodes.
    pub(crate) fn forward_scale(&self, tape: &mut Tape, k: usize, f: Var) -> Result<ScaleForward> {
        let scale = &self.scales[k];
        let raw = scale.encoder.forward(tape, f)?;
        let h = if self.config.unit_norm {
            tape.l2_normalize(raw)
        } else {
            raw
        };
        let tokens = scale.codebook.quantize(tape.value(h), self.config.similarity)?;
        let h_tilde = scale.codebook.dequantize(&tokens)?.reshape(tape.shape(h))?;
        let q = tape.straight_through(h, h_tilde.clone());
        let f_tilde = scale.decoder.forward(tape, q)?;
        Ok(ScaleForward {
            h,
            tokens,
            h_tilde,
            f_tilde,
        })
    }

    fn check_windows(&self, x: &Tensor) -> Result<usize> {
        let c = &self.config;
        if x.ndim() != 3 || x.dim(2) != c.channels {
            return Err(Error::shape(
                "tokenize",
                format!("expected (B, τ, {}), got {:?}", c.channels, x.shape()),
            ));
        }
        if x.dim(1) != c.window {
            for (k, r) in c.factors.iter().enumerate() {
                if x.dim(1) % r != 0 {
                    return Err(Error::Config(format!(
                        "window length {} is not divisible by factors[{k}] = {r}",
                        x.dim(1)
                    )));
                }
            }
            return Err(Error::LengthMismatch {
                expected: c.window,
                actual: x.dim(1),
            });
        }
        Ok(x.dim(0))
    }

    /// Tokenizes a batch `x: (B, τ, d)`. Returns `tokens[b][k]` and the
    /// summed reconstruction `(B, τ, d)`.
    pub fn tokenize_batch(&self, x: &Tensor) -> Result<(Vec<Vec<Vec<usize>>>, Tensor)> {
        let b = self.check_windows(x)?;
        let mut tape = Tape::new();
        let mut f = tape.constant(x.clone());
        let mut tokens = vec![Vec::with_capacity(self.num_scales()); b];
        let mut total: Option<Var> = None;
        for k in 0..self.num_scales() {
            let out = self.forward_scale(&mut tape, k, f)?;
            let per = out.tokens.len() / b.max(1);
            for (w, chunk) in out.tokens.chunks(per.max(1)).enumerate().take(b) {
                tokens[w].push(chunk.to_vec());
            }
            f = tape.sub(f, out.f_tilde);
            total = Some(match total {
                Some(t) => tape.add(t, out.f_tilde),
                None => out.f_tilde,
            });
        }
        let recon = tape.value(total.expect("at least one scale")).clone();
        Ok((tokens, recon))
    }

    /// Tokenizes one window `x: (τ, d)` keeping every scale's decode.
    pub fn tokenize(&self, x: &Tensor) -> Result<Tokenization> {
        if x.ndim() != 2 {
            return Err(Error::shape("tokenize", format!("expected (τ, d), got {:?}", x.shape())));
        }
        let batched = x.clone().reshape(&[1, x.dim(0), x.dim(1)])?;
        self.check_windows(&batched)?;
        let mut tape = Tape::new();
        let mut f = tape.constant(batched);
        let mut tokens = Vec::new();
        let mut reconstructions = Vec::new();
        for k in 0..self.num_scales() {
            let out = self.forward_scale(&mut tape, k, f)?;
            tokens.push(out.tokens);
            reconstructions.push(tape.value(out.f_tilde).clone().reshape(x.shape())?);
            f = tape.sub(f, out.f_tilde);
        }
        Ok(Tokenization {
            tokens,
            reconstructions,
        })
    }

    /// Decodes per-scale tokens `tokens[b][k]` of `B` windows to `(B, τ, d)`.
    pub fn decode_batch(&self, tokens: &[Vec<Vec<usize>>]) -> Result<Tensor> {
        let b = tokens.len();
        let lengths = self.token_lengths();
        let c = &self.config;
        let mut out = Tensor::zeros(&[b, c.window, c.channels]);
        if b == 0 {
            return Ok(out);
        }
        let mut tape = Tape::new();
        for (k, scale) in self.scales.iter().enumerate() {
            let mut flat = Vec::with_capacity(b * lengths[k]);
            for window in tokens {
                if window.len() != self.num_scales() {
                    return Err(Error::LengthMismatch {
                        expected: self.num_scales(),
                        actual: window.len(),
                    });
                }
                if window[k].len() != lengths[k] {
                    return Err(Error::LengthMismatch {
                        expected: lengths[k],
                        actual: window[k].len(),
                    });
                }
                flat.extend_from_slice(&window[k]);
            }
            let h = scale.codebook.dequantize(&flat).map_err(|e| match e {
                Error::TokenOutOfRange { position, value, limit } => Error::ScaleTokenOutOfRange {
                    scale: k + 1,
                    position: position % lengths[k],
                    value,
                    limit,
                },
                other => other,
            })?;
            let h = tape.constant(h.reshape(&[b, lengths[k], c.code_dim])?);
            let f = scale.decoder.forward(&mut tape, h)?;
            out.add_assign(tape.value(f));
        }
        Ok(out)
    }

    /// Decodes one window's per-scale tokens to `(τ, d)`.
    pub fn decode(&self, tokens: &[Vec<usize>]) -> Result<Tensor> {
        let c = &self.config;
        self.decode_batch(&[tokens.to_vec()])?
            .reshape(&[c.window, c.channels])
    }

    /// Marks every encoder/decoder parameter as non-trainable.
    pub fn freeze(&mut self) {
        for s in &mut self.scales {
            for p in s.encoder.params_mut().into_iter().chain(s.decoder.params_mut()) {
                p.requires_grad = false;
                p.grad = None;
            }
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("tokenizer", serde_json::to_value(&self.config)?);
        for (k, s) in self.scales.iter().enumerate() {
            ck.insert_module(&format!("scale{k}.encoder"), &s.encoder);
            ck.insert_module(&format!("scale{k}.decoder"), &s.decoder);
            ck.insert(format!("scale{k}.codebook.vectors"), s.codebook.vectors());
            let usage = Tensor::new(vec![s.codebook.size()], s.codebook.usage().to_vec())?;
            ck.insert(format!("scale{k}.codebook.usage"), &usage);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("tokenizer")?;
        let config: TokenizerConfig = serde_json::from_value(ck.meta.clone())?;
        let mut rng = crate::rng::seeded(0);
        let mut model = Self::new(config, &mut rng)?;
        for (k, s) in model.scales.iter_mut().enumerate() {
            ck.load_module(&format!("scale{k}.encoder"), &mut s.encoder)?;
            ck.load_module(&format!("scale{k}.decoder"), &mut s.decoder)?;
            let vectors = ck.tensor(&format!("scale{k}.codebook.vectors"))?;
            let usage = ck.tensor(&format!("scale{k}.codebook.usage"))?.into_data();
            if vectors.shape() != s.codebook.vectors().shape() {
                return Err(Error::Checkpoint(format!(
                    "scale {k} codebook has shape {:?}, config expects {:?}",
                    vectors.shape(),
                    s.codebook.vectors().shape()
                )));
            }
            s.codebook = Codebook::from_parts(vectors, usage, model.config.unit_norm)?;
        }
        model.freeze();
        Ok(model)
    }
}
