use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{loss_on_tape, CodebookUpdate, MultiScaleTokenizer, TokenizerConfig};
use crate::autodiff::{Param, Tape, Tensor, Var};
use crate::data::gather;
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig, Module};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub warmup: usize,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_ratio: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            optimizer: AdamWConfig {
                lr: 2e-3,
                ..AdamWConfig::default()
            },
            warmup: 100,
            min_lr_ratio: 0.05,
            grad_clip: Some(10.0),
            seed: 0,
        }
    }
}

impl TokenizerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("tokenizer_train.batch_size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("tokenizer_train.optimizer.lr must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step training record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub loss: Vec<f64>,
    /// Per-element squared reconstruction error of the batch.
    pub reconstruction: Vec<f64>,
    /// Unweighted embedding loss summed over scales.
    pub embedding: Vec<f64>,
    /// Codebook entries reset, summed over scales.
    pub resets: Vec<usize>,
}

/// Seeds every codebook with encodings of the first batch, scale by scale.
/// Runs only when reset is enabled.
fn init_codebooks(model: &mut MultiScaleTokenizer, x: &Tensor, rng: &mut rng::Rng) -> Result<()> {
    let mut tape = Tape::new();
    let mut f = tape.constant(x.clone());
    for k in 0..model.num_scales() {
        let raw = model.scales[k].encoder.forward(&mut tape, f)?;
        let h = if model.config.unit_norm {
            tape.l2_normalize(raw)
        } else {
            raw
        };
        model.scales[k].codebook.init_from(tape.value(h), rng)?;
        let out = model.forward_scale(&mut tape, k, f)?;
        f = tape.sub(f, out.f_tilde);
    }
    Ok(())
}

/// Trains encoders and decoders by gradient descent on the reconstruction
/// plus embedding objective; codebooks follow EMA, usage and reset rules.
pub fn train_tokenizer(
    windows: &Tensor,
    config: TokenizerConfig,
    train: &TokenizerTrainConfig,
) -> Result<(MultiScaleTokenizer, TrainHistory)> {
    config.validate()?;
    train.validate()?;
    if windows.ndim() != 3 || windows.dim(1) != config.window || windows.dim(2) != config.channels {
        return Err(Error::shape(
            "train_tokenizer",
            format!("expected (n, {}, {}), got {:?}", config.window, config.channels, windows.shape()),
        ));
    }
    let mut init_rng = rng::stream(train.seed, 0);
    let mut model = MultiScaleTokenizer::new(config, &mut init_rng)?;
    let mut history = TrainHistory::default();
    if train.steps == 0 {
        model.freeze();
        return Ok((model, history));
    }
    let n = windows.dim(0);
    if n == 0 {
        return Err(Error::InsufficientData("no training windows".into()));
    }
    let mut batch_rng = rng::stream(train.seed, 1);
    let mut cb_rng = rng::stream(train.seed, 2);
    let batch = train.batch_size.min(n);
    let elems = (model.config.window * model.config.channels) as f64;
    let gradient_codebooks = model.config.codebook_update == CodebookUpdate::Gradient;

    let mut opt = AdamW::new(train.optimizer);
    let mut cb_opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..train.optimizer
    });

    let mut cb_params: Vec<Param> = Vec::new();
    for step in 0..train.steps {
        let idx = index::sample(&mut batch_rng, n, batch).into_vec();
        let x = gather(windows, &idx);
        // seeding every entry from data is a reset of the whole table, so
        // the no-reset ablation keeps its random initialization
        if step == 0 && model.config.reset {
            init_codebooks(&mut model, &x, &mut cb_rng)?;
        }
        if gradient_codebooks {
            // Persistent params keep their optimizer state across steps;
            // values are refreshed because resets edit the tables in place.
            if cb_params.is_empty() {
                cb_params = model.scales.iter().map(|s| Param::new(s.codebook.vectors().clone())).collect();
            }
            for (p, s) in cb_params.iter_mut().zip(&model.scales) {
                p.value = s.codebook.vectors().clone();
            }
        }

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut f = xv;
        let mut outs = Vec::with_capacity(model.num_scales());
        let mut total: Option<Var> = None;
        let mut codebook_terms: Option<Var> = None;
        for k in 0..model.num_scales() {
            let out = model.forward_scale(&mut tape, k, f)?;
            f = tape.sub(f, out.f_tilde);
            total = Some(match total {
                Some(t) => tape.add(t, out.f_tilde),
                None => out.f_tilde,
            });
            if gradient_codebooks {
                let shape = tape.shape(out.h).to_vec();
                let table = tape.param(&cb_params[k]);
                let rows = tape.embedding(table, &out.tokens, &shape[..2])?;
                let target = tape.stop_gradient(out.h);
                let prod = tape.mul(rows, target);
                let mean = tape.mean(prod);
                let term = tape.scale(mean, -(shape[2] as f64));
                let term = tape.add_scalar(term, 1.0);
                codebook_terms = Some(match codebook_terms {
                    Some(c) => tape.add(c, term),
                    None => term,
                });
            }
            outs.push(out);
        }
        let x_tilde = total.expect("at least one scale");
        let embeddings: Vec<(Var, &Tensor)> = outs.iter().map(|o| (o.h, &o.h_tilde)).collect();
        let (mut loss, recon, emb) =
            loss_on_tape(&mut tape, xv, x_tilde, &embeddings, model.config.lambda, batch);
        if let Some(c) = codebook_terms {
            loss = tape.add(loss, c);
        }
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: loss_value,
            });
        }
        let grads = tape.backward(loss)?;
        let mut params: Vec<&mut Param> = model
            .scales
            .iter_mut()
            .flat_map(|s| {
                let mut p = s.encoder.params_mut();
                p.extend(s.decoder.params_mut());
                p
            })
            .collect();
        grads.accumulate_into(params.iter_mut().map(|p| &mut **p));
        if let Some(max) = train.grad_clip {
            clip_grad_norm(&mut params, max);
        }
        let lr = cosine_lr(train.optimizer.lr, step, train.steps, train.warmup, train.min_lr_ratio);
        opt.step(params, lr);

        if gradient_codebooks {
            grads.accumulate_into(cb_params.iter_mut());
            cb_opt.step(cb_params.iter_mut(), lr);
        }

        let mut resets = 0;
        let beta = model.config.beta;
        let threshold = model.config.usage_threshold;
        let reset_enabled = model.config.reset;
        for (k, out) in outs.iter().enumerate() {
            let h = tape.value(out.h);
            let cb = &mut model.scales[k].codebook;
            if gradient_codebooks {
                *cb.vectors_mut() = cb_params[k].value.clone();
                cb.renormalize();
            } else {
                cb.ema_update(&out.tokens, h, beta)?;
            }
            let counts = cb.batch_counts(&out.tokens);
            cb.usage_update(&counts, beta)?;
            if reset_enabled {
                resets += cb.reset(h, threshold, &mut cb_rng)?;
            }
        }

        history.loss.push(loss_value);
        history.reconstruction.push(tape.value(recon).item() / elems);
        history.embedding.push(tape.value(emb).item());
        history.resets.push(resets);
        if (step + 1) % 500 == 0 || step + 1 == train.steps {
            log::info!(
                "tokenizer step {}/{}: loss {:.5} mse {:.5} resets {}",
                step + 1,
                train.steps,
                loss_value,
                tape.value(recon).item() / elems,
                resets
            );
        }
    }
    model.freeze();
    Ok((model, history))
}
