//! Generation quality metrics.

mod frechet;
mod posthoc;

pub use frechet::{feature_frechet_score, frechet_distance, gaussian_stats, window_features, AUTOCORR_LAGS, COV_RIDGE};
pub use posthoc::{discriminative_score, predictive_score, PostHocConfig, MIN_WINDOWS};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::MultiScaleTokenizer;

pub const DEFAULT_BINS: usize = 50;

/// One metric over repeated runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub mean: f64,
    /// Sample standard deviation over repeats, 0 for a single value.
    pub std: f64,
    pub values: Vec<f64>,
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn from_values(name: &str, values: Vec<f64>, config: serde_json::Value) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            name: name.into(),
            mean,
            std,
            values,
            config,
        }
    }

    pub fn single(name: &str, value: f64, config: serde_json::Value) -> Self {
        Self::from_values(name, vec![value], config)
    }
}

/// Fraction of each scale's codebook selected at least once over `windows`.
pub fn codebook_usage_pct(tokenizer: &MultiScaleTokenizer, windows: &Tensor) -> Result<Vec<f64>> {
    if windows.ndim() != 3 || windows.dim(0) == 0 {
        return Err(Error::InsufficientData("codebook usage needs at least one window".into()));
    }
    let sizes = tokenizer.vocab_sizes();
    let mut used: Vec<Vec<bool>> = sizes.iter().map(|&v| vec![false; v]).collect();
    let idx: Vec<usize> = (0..windows.dim(0)).collect();
    for chunk in idx.chunks(256) {
        let (tokens, _) = tokenizer.tokenize_batch(&crate::data::gather(windows, chunk))?;
        for w in &tokens {
            for (k, seq) in w.iter().enumerate() {
                for &t in seq {
                    used[k][t] = true;
                }
            }
        }
    }
    Ok(used
        .iter()
        .map(|u| u.iter().filter(|&&b| b).count() as f64 / u.len() as f64)
        .collect())
}

/// Bin index of `v` among `bins` equal-width bins over `[lo, hi]`; the top
/// edge belongs to the last bin.
fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1)
}

/// Mean over features of the total-variation distance between histograms
/// of all values of that feature, on `bins` bins over the pooled range.
pub fn marginal_hist_distance(real: &Tensor, synth: &Tensor, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::Config(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let d = real.shape().last().copied().unwrap_or(0);
    if synth.shape().last().copied() != Some(d) || d == 0 {
        return Err(Error::shape(
            "marginal_hist_distance",
            format!("feature counts differ: {:?} vs {:?}", real.shape(), synth.shape()),
        ));
    }
    if real.numel() == 0 || synth.numel() == 0 {
        return Err(Error::InsufficientData("histogram distance needs values on both sides".into()));
    }
    let mut total = 0.0;
    for c in 0..d {
        let col = |t: &Tensor| t.data().iter().skip(c).step_by(d).copied().collect::<Vec<f64>>();
        let (a, b) = (col(real), col(synth));
        let lo = a.iter().chain(&b).copied().fold(f64::INFINITY, f64::min);
        let hi = a.iter().chain(&b).copied().fold(f64::NEG_INFINITY, f64::max);
        let hist = |vals: &[f64]| {
            let mut h = vec![0.0; bins];
            for &v in vals {
                h[bin_of(v, lo, hi, bins)] += 1.0;
            }
            h.iter_mut().for_each(|x| *x /= vals.len() as f64);
            h
        };
        let (ha, hb) = (hist(&a), hist(&b));
        total += 0.5 * ha.iter().zip(&hb).map(|(p, q)| (p - q).abs()).sum::<f64>();
    }
    Ok(total / d as f64)
}

/// White noise with the shape of `like`, uniform over each feature's
/// observed range.
pub fn uniform_noise_like(like: &Tensor, seed: u64) -> Result<Tensor> {
    let d = *like.shape().last().ok_or_else(|| Error::shape("uniform_noise_like", "scalar input"))?;
    if like.numel() == 0 {
        return Err(Error::InsufficientData("cannot infer feature ranges from no values".into()));
    }
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for row in like.data().chunks(d) {
        for c in 0..d {
            lo[c] = lo[c].min(row[c]);
            hi[c] = hi[c].max(row[c]);
        }
    }
    let mut r = rng::seeded(seed);
    let mut out = like.clone();
    for row in out.data_mut().chunks_mut(d) {
        for c in 0..d {
            row[c] = if hi[c] > lo[c] { r.gen_range(lo[c]..hi[c]) } else { lo[c] };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
