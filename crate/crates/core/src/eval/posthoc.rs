use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::MetricReport;
use crate::autodiff::{ConvSpec, Param, Tape, Tensor, Var};
use crate::data::gather;
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Conv1d, Linear, Module};
use crate::rng;

/// Minimum windows per side for the discriminative score.
pub const MIN_WINDOWS: usize = 20;

/// Shared settings of the post-hoc classifier and predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostHocConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub lr: f64,
    /// Independent repeats, each with its own seed stream.
    pub repeats: usize,
    /// Fraction of each side used for training the classifier.
    pub train_frac: f64,
    pub seed: u64,
}

impl Default for PostHocConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 128,
            hidden: 32,
            lr: 1e-3,
            repeats: 5,
            train_frac: 0.8,
            seed: 0,
        }
    }
}

impl PostHocConfig {
    /// Predictor defaults: the same network trained for 5000 steps.
    pub fn predictive() -> Self {
        Self {
            steps: 5000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.hidden == 0 || self.repeats == 0 {
            return Err(Error::Config("post-hoc batch_size, hidden and repeats must be positive".into()));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Config(format!("post-hoc train_frac {} outside (0, 1)", self.train_frac)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("post-hoc lr must be positive".into()));
        }
        Ok(())
    }

    fn echo(&self, extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({ "posthoc": self, "data": extra })
    }
}

fn check_pair(real: &Tensor, synth: &Tensor) -> Result<()> {
    if real.ndim() != 3 || synth.ndim() != 3 || real.shape()[1..] != synth.shape()[1..] {
        return Err(Error::shape(
            "posthoc",
            format!("windows {:?} and {:?} differ in (τ, d)", real.shape(), synth.shape()),
        ));
    }
    Ok(())
}

/// Two causal convolutions followed by a per-step projection.
struct ConvNet {
    conv1: Conv1d,
    conv2: Conv1d,
}

impl ConvNet {
    fn new(channels: usize, hidden: usize, rng: &mut rng::Rng) -> Self {
        Self {
            conv1: Conv1d::new(channels, hidden, ConvSpec::causal(3, 1), rng),
            conv2: Conv1d::new(hidden, hidden, ConvSpec::causal(3, 2), rng),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.conv1.forward(tape, x);
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, h);
        tape.relu(h)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv1.params_mut();
        p.extend(self.conv2.params_mut());
        p
    }
}

fn step_model(tape: &Tape, loss: Var, params: Vec<&mut Param>, opt: &mut AdamW, lr: f64) -> Result<()> {
    let grads = tape.backward(loss)?;
    let mut params = params;
    grads.accumulate_into(params.iter_mut().map(|p| &mut **p));
    opt.step(params, lr);
    Ok(())
}

fn adam(lr: f64) -> AdamW {
    AdamW::new(AdamWConfig {
        lr,
        ..AdamWConfig::default()
    })
}

fn one_discriminative_run(real: &Tensor, synth: &Tensor, cfg: &PostHocConfig, stream: u64) -> Result<f64> {
    let mut r = rng::stream(cfg.seed, stream);
    let n = real.dim(0).min(synth.dim(0));
    let mut real_idx: Vec<usize> = index::sample(&mut r, real.dim(0), n).into_vec();
    let mut synth_idx: Vec<usize> = index::sample(&mut r, synth.dim(0), n).into_vec();
    real_idx.shuffle(&mut r);
    synth_idx.shuffle(&mut r);
    let n_train = ((n as f64 * cfg.train_frac).round() as usize).clamp(1, n - 1);

    // stacked (2n, τ, d): real first, labelled 1
    let data = Tensor::stack(&[gather(real, &real_idx), gather(synth, &synth_idx)])?
        .reshape(&[2 * n, real.dim(1), real.dim(2)])?;
    let label = |i: usize| if i < n { 1.0 } else { 0.0 };
    let train: Vec<usize> = (0..n_train).chain(n..n + n_train).collect();
    let test: Vec<usize> = (n_train..n).chain(n + n_train..2 * n).collect();

    let mut net = ConvNet::new(real.dim(2), cfg.hidden, &mut r);
    let mut head = Linear::new(cfg.hidden, 1, &mut r);
    let mut opt = adam(cfg.lr);
    let batch = cfg.batch_size.min(train.len());
    for _ in 0..cfg.steps {
        let pick: Vec<usize> = index::sample(&mut r, train.len(), batch).into_iter().map(|j| train[j]).collect();
        let targets: Vec<f64> = pick.iter().map(|&i| label(i)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(gather(&data, &pick));
        let h = net.forward(&mut tape, x);
        let pooled = tape.mean_axis(h, 1);
        let logits = head.forward(&mut tape, pooled);
        let loss = tape.bce_with_logits(logits, &targets);
        let mut params = net.params_mut();
        params.extend(head.params_mut());
        step_model(&tape, loss, params, &mut opt, cfg.lr)?;
    }

    let mut correct = 0usize;
    for chunk in test.chunks(512) {
        let mut tape = Tape::new();
        let x = tape.constant(gather(&data, chunk));
        let h = net.forward(&mut tape, x);
        let pooled = tape.mean_axis(h, 1);
        let logits = head.forward(&mut tape, pooled);
        for (&i, &z) in chunk.iter().zip(tape.value(logits).data()) {
            if (z > 0.0) == (label(i) == 1.0) {
                correct += 1;
            }
        }
    }
    let acc = correct as f64 / test.len() as f64;
    Ok((acc - 0.5).abs())
}

/// `|accuracy − 0.5|` of a classifier separating real (label 1) from
/// synthetic (label 0) windows on a held-out split, once per repeat.
pub fn discriminative_score(real: &Tensor, synth: &Tensor, cfg: &PostHocConfig) -> Result<MetricReport> {
    cfg.validate()?;
    check_pair(real, synth)?;
    if real.dim(0) < MIN_WINDOWS || synth.dim(0) < MIN_WINDOWS {
        return Err(Error::InsufficientData(format!(
            "discriminative score needs at least {MIN_WINDOWS} windows per side, got {} real and {} synthetic",
            real.dim(0),
            synth.dim(0)
        )));
    }
    let values = (0..cfg.repeats)
        .map(|k| one_discriminative_run(real, synth, cfg, k as u64))
        .collect::<Result<Vec<_>>>()?;
    let echo = cfg.echo(serde_json::json!({ "real": real.dim(0), "synthetic": synth.dim(0) }));
    Ok(MetricReport::from_values("discriminative", values, echo))
}

/// Input `x_{1:τ−1}` and target `x_{2:τ}` of every window.
fn shifted_pairs(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, tau, d) = (x.dim(0), x.dim(1), x.dim(2));
    let mut inp = Vec::with_capacity(n * (tau - 1) * d);
    let mut tgt = Vec::with_capacity(n * (tau - 1) * d);
    for w in x.data().chunks(tau * d) {
        inp.extend_from_slice(&w[..(tau - 1) * d]);
        tgt.extend_from_slice(&w[d..]);
    }
    Ok((
        Tensor::new(vec![n, tau - 1, d], inp)?,
        Tensor::new(vec![n, tau - 1, d], tgt)?,
    ))
}

fn one_predictive_run(real: &Tensor, synth: &Tensor, cfg: &PostHocConfig, stream: u64) -> Result<f64> {
    let mut r = rng::stream(cfg.seed, stream);
    let d = real.dim(2);
    let (train_in, train_out) = shifted_pairs(synth)?;
    let (test_in, test_out) = shifted_pairs(real)?;
    let mut net = ConvNet::new(d, cfg.hidden, &mut r);
    let mut proj = Conv1d::new(cfg.hidden, d, ConvSpec::symmetric(1, 1, 0, 1), &mut r);
    let mut opt = adam(cfg.lr);
    let n = synth.dim(0);
    let batch = cfg.batch_size.min(n);
    let forward = |tape: &mut Tape, net: &ConvNet, proj: &Conv1d, x: Tensor| {
        let x = tape.constant(x);
        let h = net.forward(tape, x);
        proj.forward(tape, h)
    };
    for _ in 0..cfg.steps {
        let pick = index::sample(&mut r, n, batch).into_vec();
        let mut tape = Tape::new();
        let pred = forward(&mut tape, &net, &proj, gather(&train_in, &pick));
        let target = tape.constant(gather(&train_out, &pick));
        let diff = tape.sub(pred, target);
        let abs = tape.abs(diff);
        let loss = tape.mean(abs);
        let mut params = net.params_mut();
        params.extend(proj.params_mut());
        step_model(&tape, loss, params, &mut opt, cfg.lr)?;
    }
    let mut total = 0.0;
    let idx: Vec<usize> = (0..real.dim(0)).collect();
    for chunk in idx.chunks(512) {
        let mut tape = Tape::new();
        let pred = forward(&mut tape, &net, &proj, gather(&test_in, chunk));
        let target = gather(&test_out, chunk);
        total += tape
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    }
    Ok(total / test_out.numel() as f64)
}

/// Mean absolute error on real windows of a one-step-ahead predictor
/// trained on synthetic windows (train on synthetic, test on real).
pub fn predictive_score(real: &Tensor, synth: &Tensor, cfg: &PostHocConfig) -> Result<MetricReport> {
    cfg.validate()?;
    check_pair(real, synth)?;
    if real.dim(1) < 2 {
        return Err(Error::Config(format!("predictive score needs τ ≥ 2, got {}", real.dim(1))));
    }
    if real.dim(0) == 0 || synth.dim(0) == 0 {
        return Err(Error::InsufficientData("predictive score needs windows on both sides".into()));
    }
    let values = (0..cfg.repeats)
        .map(|k| one_predictive_run(real, synth, cfg, k as u64))
        .collect::<Result<Vec<_>>>()?;
    let echo = cfg.echo(serde_json::json!({ "real": real.dim(0), "synthetic": synth.dim(0) }));
    Ok(MetricReport::from_values("predictive", values, echo))
}
