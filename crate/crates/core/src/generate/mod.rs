//! Sampling token sequences from a trained transformer and decoding them
//! into series.

use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::rng;
use crate::seqmodel::{type_ids, ARTransformer, TokenVocabulary};
use crate::tokenizer::MultiScaleTokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
    /// Sequences advanced together per forward pass.
    pub batch: usize,
    /// Restrict each position to its own scale's token range.
    pub constrained: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            seed: 0,
            batch: 64,
            constrained: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "sampler.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > vocab_size {
                return Err(Error::Config(format!("sampler.top_k {k} outside [1, {vocab_size}]")));
            }
        }
        if self.batch == 0 {
            return Err(Error::Config("sampler.batch must be positive".into()));
        }
        Ok(())
    }
}

/// Draws one token from a logit row after masking, top-k truncation and
/// temperature scaling.
fn sample_row<R: rand::Rng + ?Sized>(
    row: &[f64],
    allowed: std::ops::Range<usize>,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> usize {
    let mut candidates: Vec<usize> = allowed.collect();
    if let Some(k) = sampler.top_k {
        // stable sort keeps lower indices first among equal logits
        candidates.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        candidates.truncate(k.max(1));
    }
    let max = candidates.iter().map(|&i| row[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&i| ((row[i] - max) / sampler.temperature).exp())
        .collect();
    match WeightedIndex::new(&weights) {
        Ok(dist) => candidates[dist.sample(rng)],
        // non-finite logits: fall back to the first candidate
        Err(_) => candidates[0],
    }
}

/// Samples `n` label sequences `ŷ_{1:L}` autoregressively from BOS. Sample
/// `i` uses its own random stream, so results do not depend on batching.
pub fn sample_tokens(model: &ARTransformer, n: usize, sampler: &SamplerConfig) -> Result<Vec<Vec<usize>>> {
    let vocab = model.vocab();
    sampler.validate(vocab.total())?;
    let len = model.max_len();
    let types = type_ids(model.lengths());
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let count = sampler.batch.min(n - start);
        let mut rngs: Vec<rng::Rng> = (start..start + count).map(|i| rng::stream(sampler.seed, i as u64)).collect();
        let mut seqs: Vec<Vec<usize>> = vec![vec![vocab.bos()]; count];
        for t in 0..len {
            let flat: Vec<usize> = seqs.concat();
            let mut tape = Tape::new();
            let logits = model.forward(&mut tape, &flat, count)?;
            let logits = tape.value(logits);
            let v = vocab.total();
            let allowed = if sampler.constrained {
                vocab.range(types[t + 1] - 1)
            } else {
                0..v
            };
            for (b, seq) in seqs.iter_mut().enumerate() {
                let off = (b * (t + 1) + t) * v;
                let row = &logits.data()[off..off + v];
                seq.push(sample_row(row, allowed.clone(), sampler, &mut rngs[b]));
            }
        }
        out.extend(seqs.into_iter().map(|s| s[1..].to_vec()));
        start += count;
    }
    Ok(out)
}

/// Per-scale raw tokens of a sampled sequence. Tokens outside their
/// segment's range are clamped into it; the second value counts them.
pub fn allocate_tokens(seq: &[usize], vocab: &TokenVocabulary, lengths: &[usize]) -> Result<(Vec<Vec<usize>>, usize)> {
    let total: usize = lengths.iter().sum();
    if seq.len() != total || lengths.len() != vocab.num_scales() {
        return Err(Error::LengthMismatch {
            expected: total,
            actual: seq.len(),
        });
    }
    let mut clamped = 0;
    let mut out = Vec::with_capacity(lengths.len());
    let mut pos = 0;
    for (k, &l) in lengths.iter().enumerate() {
        let range = vocab.range(k);
        let seg = seq[pos..pos + l]
            .iter()
            .map(|&t| {
                if range.contains(&t) {
                    t - range.start
                } else {
                    clamped += 1;
                    if t < range.start {
                        0
                    } else {
                        range.len() - 1
                    }
                }
            })
            .collect();
        out.push(seg);
        pos += l;
    }
    Ok((out, clamped))
}

/// Decodes per-sample, per-scale tokens to `(n, τ, d)` series, mapped back
/// to data units when a normalizer is given.
pub fn decode_multi_scale(
    tokens: &[Vec<Vec<usize>>],
    tokenizer: &MultiScaleTokenizer,
    normalizer: Option<&Normalizer>,
) -> Result<Tensor> {
    let c = &tokenizer.config;
    if tokens.is_empty() {
        return Ok(Tensor::zeros(&[0, c.window, c.channels]));
    }
    let mut parts = Vec::new();
    for chunk in tokens.chunks(256) {
        parts.push(tokenizer.decode_batch(chunk)?);
    }
    let x = if parts.len() == 1 {
        parts.pop().expect("one part")
    } else {
        let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(vec![tokens.len(), c.window, c.channels], data)?
    };
    match normalizer {
        Some(n) => n.denormalize(&x),
        None => Ok(x),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// `tokens[i][k]`: raw scale-`k` tokens of sample `i`.
    pub tokens: Vec<Vec<Vec<usize>>>,
    /// `(n, τ, d)`.
    pub samples: Tensor,
    /// Tokens clamped during allocation; always 0 with constrained sampling.
    pub clamped: usize,
}

/// Samples, allocates and decodes `n` series.
pub fn generate(
    model: &ARTransformer,
    tokenizer: &MultiScaleTokenizer,
    normalizer: Option<&Normalizer>,
    n: usize,
    sampler: &SamplerConfig,
) -> Result<Generation> {
    if model.vocab().sizes() != tokenizer.vocab_sizes().as_slice() || model.lengths() != tokenizer.token_lengths().as_slice()
    {
        return Err(Error::Config(format!(
            "transformer vocabulary {:?} / lengths {:?} do not match tokenizer {:?} / {:?}",
            model.vocab().sizes(),
            model.lengths(),
            tokenizer.vocab_sizes(),
            tokenizer.token_lengths()
        )));
    }
    let seqs = sample_tokens(model, n, sampler)?;
    let mut clamped = 0;
    let mut tokens = Vec::with_capacity(n);
    for s in &seqs {
        let (t, c) = allocate_tokens(s, model.vocab(), model.lengths())?;
        clamped += c;
        tokens.push(t);
    }
    if clamped > 0 {
        log::warn!("{clamped} sampled tokens fell outside their scale and were clamped");
    }
    let samples = decode_multi_scale(&tokens, tokenizer, normalizer)?;
    Ok(Generation {
        tokens,
        samples,
        clamped,
    })
}

/// One JSON array of per-scale token arrays per line.
pub fn write_tokens_jsonl(path: &Path, tokens: &[Vec<Vec<usize>>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in tokens {
        serde_json::to_writer(&mut f, t)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
