//! Stage-2 token plumbing and the multi-scale autoregressive transformer.
//!
//! Scale `k` tokens are shifted into the disjoint range `[S^(k−1), S^(k))`
//! of a shared vocabulary, concatenated coarse scale first, and prefixed by
//! a BOS token whose index is the total vocabulary size.

mod model;
mod train;

pub use model::{ar_loss, ARTransformer, TransformerConfig};
pub use train::{evaluate_loss, evaluate_windows, train_transformer, ARHistory, TransformerTrainConfig};

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-scale vocabulary sizes and their cumulative offsets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TokenVocabulary {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl TryFrom<Vec<usize>> for TokenVocabulary {
    type Error = Error;

    fn try_from(sizes: Vec<usize>) -> Result<Self> {
        Self::new(sizes)
    }
}

impl From<TokenVocabulary> for Vec<usize> {
    fn from(v: TokenVocabulary) -> Self {
        v.sizes
    }
}

impl TokenVocabulary {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Config("vocabulary needs at least one scale".into()));
        }
        if let Some(k) = sizes.iter().position(|&v| v == 0) {
            return Err(Error::Config(format!("scale {} has an empty vocabulary", k + 1)));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0usize);
        for &v in &sizes {
            let last = *offsets.last().expect("non-empty");
            offsets.push(
                last.checked_add(v)
                    .ok_or_else(|| Error::Overflow("total vocabulary size".into()))?,
            );
        }
        Ok(Self { sizes, offsets })
    }

    pub fn num_scales(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// `S^(0..=K)`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Total size `V = S^(K)`, excluding BOS.
    pub fn total(&self) -> usize {
        self.offsets[self.sizes.len()]
    }

    pub fn bos(&self) -> usize {
        self.total()
    }

    /// Shifted range of scale `k` (zero-based).
    pub fn range(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    /// Zero-based scale owning shifted token `token`, `None` for BOS or
    /// anything beyond it.
    pub fn scale_of(&self, token: usize) -> Option<usize> {
        if token >= self.total() {
            return None;
        }
        Some(self.offsets.partition_point(|&s| s <= token) - 1)
    }
}

/// Adds `S^(k)` to every raw token of zero-based scale `k`.
pub fn shift_tokens(tokens: &[usize], vocab: &TokenVocabulary, k: usize) -> Result<Vec<usize>> {
    let size = vocab.sizes[k];
    tokens
        .iter()
        .enumerate()
        .map(|(position, &t)| {
            if t >= size {
                Err(Error::ScaleTokenOutOfRange {
                    scale: k + 1,
                    position,
                    value: t,
                    limit: size,
                })
            } else {
                Ok(t + vocab.offsets[k])
            }
        })
        .collect()
}

/// Inverse of [`shift_tokens`].
pub fn unshift_tokens(tokens: &[usize], vocab: &TokenVocabulary, k: usize) -> Result<Vec<usize>> {
    let range = vocab.range(k);
    tokens
        .iter()
        .enumerate()
        .map(|(position, &t)| {
            if range.contains(&t) {
                Ok(t - range.start)
            } else {
                Err(Error::ScaleTokenOutOfRange {
                    scale: k + 1,
                    position,
                    value: t,
                    limit: range.end,
                })
            }
        })
        .collect()
}

pub fn concat_scales(scales: &[Vec<usize>]) -> Vec<usize> {
    scales.concat()
}

/// Cuts a concatenated sequence back into segments of `lengths`.
pub fn split_scales(seq: &[usize], lengths: &[usize]) -> Result<Vec<Vec<usize>>> {
    let total: usize = lengths.iter().sum();
    if seq.len() != total {
        return Err(Error::LengthMismatch {
            expected: total,
            actual: seq.len(),
        });
    }
    let mut out = Vec::with_capacity(lengths.len());
    let mut start = 0;
    for &l in lengths {
        out.push(seq[start..start + l].to_vec());
        start += l;
    }
    Ok(out)
}

/// Shifts every scale and concatenates: the training labels `y_{1:L}`.
pub fn label_sequence(per_scale: &[Vec<usize>], vocab: &TokenVocabulary) -> Result<Vec<usize>> {
    if per_scale.len() != vocab.num_scales() {
        return Err(Error::LengthMismatch {
            expected: vocab.num_scales(),
            actual: per_scale.len(),
        });
    }
    let shifted = per_scale
        .iter()
        .enumerate()
        .map(|(k, y)| shift_tokens(y, vocab, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(concat_scales(&shifted))
}

/// `[BOS] ⊕ y_{1:L−1}`.
pub fn make_input(labels: &[usize], vocab: &TokenVocabulary) -> Vec<usize> {
    let mut input = Vec::with_capacity(labels.len());
    if labels.is_empty() {
        return input;
    }
    input.push(vocab.bos());
    input.extend_from_slice(&labels[..labels.len() - 1]);
    input
}

/// Replaces each non-BOS token with probability `eps` by a uniform draw
/// from its own scale's range.
pub fn augment<R: Rng + ?Sized>(input: &[usize], vocab: &TokenVocabulary, eps: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::Config(format!("augmentation probability {eps} outside [0, 1]")));
    }
    input
        .iter()
        .enumerate()
        .map(|(position, &t)| {
            if t == vocab.bos() {
                return Ok(t);
            }
            let k = vocab.scale_of(t).ok_or(Error::TokenOutOfRange {
                position,
                value: t,
                limit: vocab.bos() + 1,
            })?;
            if eps > 0.0 && rng.gen_bool(eps) {
                Ok(rng.gen_range(vocab.range(k)))
            } else {
                Ok(t)
            }
        })
        .collect()
}

/// Scale id per position of `[BOS] ⊕ y_{1:L}`: 0 for BOS, then `k` (one-based)
/// repeated `L^(k)` times.
pub fn type_ids(lengths: &[usize]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(1 + lengths.iter().sum::<usize>());
    ids.push(0);
    for (k, &l) in lengths.iter().enumerate() {
        ids.extend(std::iter::repeat(k + 1).take(l));
    }
    ids
}

#[cfg(test)]
mod tests;
