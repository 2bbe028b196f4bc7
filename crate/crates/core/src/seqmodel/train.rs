use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{augment, label_sequence, make_input, ARTransformer, TokenVocabulary, TransformerConfig};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig, Module};
use crate::rng;
use crate::tokenizer::MultiScaleTokenizer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub warmup: usize,
    pub min_lr_ratio: f64,
    pub grad_clip: Option<f64>,
    /// Input token replacement probability `ε`.
    pub augment: f64,
    pub seed: u64,
}

impl Default for TransformerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 64,
            optimizer: AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.01,
                ..AdamWConfig::default()
            },
            warmup: 100,
            min_lr_ratio: 0.05,
            grad_clip: Some(1.0),
            augment: 0.1,
            seed: 0,
        }
    }
}

impl TransformerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("transformer_train.batch_size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("transformer_train.optimizer.lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.augment) {
            return Err(Error::Config(format!(
                "transformer_train.augment {} outside [0, 1]",
                self.augment
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ARHistory {
    pub loss: Vec<f64>,
}

/// Label sequences `y_{1:L}` for every window.
fn label_all(tokenizer: &MultiScaleTokenizer, windows: &Tensor, vocab: &TokenVocabulary) -> Result<Vec<Vec<usize>>> {
    let (tokens, _) = tokenizer.tokenize_batch(windows)?;
    tokens.iter().map(|w| label_sequence(w, vocab)).collect()
}

/// Mean next-token loss over `labels`, without augmentation.
pub fn evaluate_loss(model: &ARTransformer, labels: &[Vec<usize>]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InsufficientData("no sequences to evaluate".into()));
    }
    let mut total = 0.0;
    for chunk in labels.chunks(256) {
        let inputs: Vec<usize> = chunk.iter().flat_map(|y| make_input(y, model.vocab())).collect();
        let flat: Vec<usize> = chunk.concat();
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &inputs, chunk.len())?;
        let loss = super::ar_loss(&mut tape, logits, &flat)?;
        total += tape.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / labels.len() as f64)
}

/// Held-out loss of `model` on `windows` tokenized by `tokenizer`.
pub fn evaluate_windows(model: &ARTransformer, tokenizer: &MultiScaleTokenizer, windows: &Tensor) -> Result<f64> {
    evaluate_loss(model, &label_all(tokenizer, windows, model.vocab())?)
}

/// Trains a fresh transformer on the token sequences of `windows`.
pub fn train_transformer(
    windows: &Tensor,
    tokenizer: &MultiScaleTokenizer,
    config: TransformerConfig,
    train: &TransformerTrainConfig,
) -> Result<(ARTransformer, ARHistory)> {
    train.validate()?;
    let vocab = TokenVocabulary::new(tokenizer.vocab_sizes())?;
    let mut init_rng = rng::stream(train.seed, 0);
    let mut model = ARTransformer::new(config, vocab.clone(), tokenizer.token_lengths(), &mut init_rng)?;
    let mut history = ARHistory::default();
    if train.steps == 0 {
        model.freeze();
        return Ok((model, history));
    }
    let labels = label_all(tokenizer, windows, &vocab)?;
    if labels.is_empty() {
        return Err(Error::InsufficientData("no training windows".into()));
    }
    let n = labels.len();
    let batch = train.batch_size.min(n);
    let mut batch_rng = rng::stream(train.seed, 1);
    let mut aug_rng = rng::stream(train.seed, 2);
    let mut opt = AdamW::new(train.optimizer);

    for step in 0..train.steps {
        let idx = index::sample(&mut batch_rng, n, batch).into_vec();
        let mut inputs = Vec::with_capacity(batch * model.max_len());
        let mut targets = Vec::with_capacity(batch * model.max_len());
        for &i in &idx {
            let input = make_input(&labels[i], &vocab);
            inputs.extend(augment(&input, &vocab, train.augment, &mut aug_rng)?);
            targets.extend_from_slice(&labels[i]);
        }
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &inputs, batch)?;
        let loss = super::ar_loss(&mut tape, logits, &targets)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        let mut params = model.params_mut();
        grads.accumulate_into(params.iter_mut().map(|p| &mut **p));
        if let Some(max) = train.grad_clip {
            clip_grad_norm(&mut params, max);
        }
        let lr = cosine_lr(train.optimizer.lr, step, train.steps, train.warmup, train.min_lr_ratio);
        opt.step(params, lr);
        history.loss.push(value);
        if (step + 1) % 500 == 0 || step + 1 == train.steps {
            log::info!("transformer step {}/{}: loss {:.5}", step + 1, train.steps, value);
        }
    }
    model.freeze();
    Ok((model, history))
}
