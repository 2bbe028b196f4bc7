//! Rate and distortion arithmetic for discrete tokenizations.
//!
//! A tokenization with `L` tokens drawn from a codebook of size `V` needs
//! `L·log₂V` bits. Growing the codebook of one scale from `V` to `V + V'`
//! gives `R_s = L·log₂(V + V')`; adding a second scale of `L'` tokens over
//! `V'` entries gives `R_m = L·log₂V + L'·log₂V'`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Bits needed to index `l` tokens from a codebook of size `v`.
pub fn rate(l: u64, v: u64) -> f64 {
    if l == 0 {
        return 0.0;
    }
    l as f64 * (v as f64).log2()
}

/// Smallest `V` with `rate(l, V) ≥ target`.
pub fn min_codebook_size(target: f64, l: u64) -> Result<u64> {
    if !(target >= 0.0 && target.is_finite()) {
        return Err(Error::Config(format!("target rate must be finite and non-negative, got {target}")));
    }
    if l == 0 {
        return Err(Error::Config("token count must be positive".into()));
    }
    if target == 0.0 {
        log::warn!("zero target rate gives V = 1, which cannot code anything");
        return Ok(1);
    }
    let guess = (target / l as f64).exp2().ceil();
    if !(guess < u64::MAX as f64) {
        return Err(Error::Overflow(format!("codebook size for rate {target} over {l} tokens")));
    }
    let mut v = (guess as u64).max(1);
    // the float ceiling can be off by one near exact powers of two
    while v > 1 && rate(l, v - 1) >= target {
        v -= 1;
    }
    while rate(l, v) < target {
        v = v
            .checked_add(1)
            .ok_or_else(|| Error::Overflow(format!("codebook size for rate {target}")))?;
    }
    Ok(v)
}

/// `L·log₂(V + V')`.
pub fn rate_single_expand(l: u64, v: u64, v_extra: u64) -> f64 {
    rate(l, v + v_extra)
}

/// `L·log₂V + L'·log₂V'`.
pub fn rate_multi(l: u64, v: u64, l_extra: u64, v_extra: u64) -> f64 {
    rate(l, v) + rate(l_extra, v_extra)
}

/// Base tokenization `(L, V)` and the added budget `(L', V')`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateConfig {
    pub l: u64,
    pub v: u64,
    pub l_extra: u64,
    pub v_extra: u64,
}

pub const SWEEP_MIN_V: u64 = 1 << 7;
pub const SWEEP_MAX_V: u64 = 1 << 10;

impl RateConfig {
    /// `None` when admissible, otherwise why not: both codebook sizes in
    /// `[2^7, 2^10]`, both ratios in `[1/4, 4]` and on the same side of 1.
    pub fn inadmissible(&self) -> Option<String> {
        let range = SWEEP_MIN_V..=SWEEP_MAX_V;
        if !range.contains(&self.v) || !range.contains(&self.v_extra) {
            return Some(format!("V = {} and V' = {} must lie in [128, 1024]", self.v, self.v_extra));
        }
        if self.l == 0 || self.l_extra == 0 {
            return Some("L and L' must be positive".into());
        }
        let in_ratio = |a: u64, b: u64| 4 * a >= b && a <= 4 * b;
        if !in_ratio(self.v_extra, self.v) {
            return Some(format!("V'/V = {}/{} outside [1/4, 4]", self.v_extra, self.v));
        }
        if !in_ratio(self.l_extra, self.l) {
            return Some(format!("L'/L = {}/{} outside [1/4, 4]", self.l_extra, self.l));
        }
        let same_side = (self.v_extra >= self.v && self.l_extra >= self.l) || (self.v_extra <= self.v && self.l_extra <= self.l);
        if !same_side {
            return Some("V'/V and L'/L lie on opposite sides of 1".into());
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub config: RateConfig,
    pub r_s: f64,
    pub r_m: f64,
}

impl RateRow {
    pub fn multi_scale_wins(&self) -> bool {
        self.r_m > self.r_s
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    pub excluded: Vec<(RateConfig, String)>,
}

impl RateReport {
    /// True iff `R_m > R_s` on every admissible row.
    pub fn all_multi_scale_win(&self) -> bool {
        self.rows.iter().all(RateRow::multi_scale_wins)
    }

    pub fn violations(&self) -> usize {
        self.rows.iter().filter(|r| !r.multi_scale_wins()).count()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["l", "v", "l_extra", "v_extra", "r_s", "r_m", "verdict"])
            .map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            let c = r.config;
            let verdict = if r.multi_scale_wins() { "multi" } else { "single" };
            w.write_record([
                c.l.to_string(),
                c.v.to_string(),
                c.l_extra.to_string(),
                c.v_extra.to_string(),
                r.r_s.to_string(),
                r.r_m.to_string(),
                verdict.to_string(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        row: 0,
        column: 0,
        message: e.to_string(),
    }
}

/// Evaluates both rates on every admissible config; the rest are listed
/// with the reason they were excluded.
pub fn compare_rates(configs: &[RateConfig]) -> RateReport {
    let mut report = RateReport::default();
    for &c in configs {
        match c.inadmissible() {
            Some(reason) => report.excluded.push((c, reason)),
            None => report.rows.push(RateRow {
                config: c,
                r_s: rate_single_expand(c.l, c.v, c.v_extra),
                r_m: rate_multi(c.l, c.v, c.l_extra, c.v_extra),
            }),
        }
    }
    report
}

/// `V, V' ∈ {128, 256, 512, 1024}`, `L, L' ∈ 4..=64`, admissible pairs only.
pub fn default_sweep() -> Vec<RateConfig> {
    let sizes = [128, 256, 512, 1024];
    let mut out = Vec::new();
    for &v in &sizes {
        for &v_extra in &sizes {
            for l in 4..=64 {
                for l_extra in 4..=64 {
                    let c = RateConfig { l, v, l_extra, v_extra };
                    if c.inadmissible().is_none() {
                        out.push(c);
                    }
                }
            }
        }
    }
    out
}

/// `(1/τ)·Σ_t ‖x_t − x̃_t‖²` for windows of shape `(τ, d)`.
pub fn distortion(x: &Tensor, x_tilde: &Tensor) -> Result<f64> {
    if x.shape() != x_tilde.shape() || x.ndim() != 2 {
        return Err(Error::shape(
            "distortion",
            format!("expected two (τ, d) windows, got {:?} and {:?}", x.shape(), x_tilde.shape()),
        ));
    }
    let sq: f64 = x.data().iter().zip(x_tilde.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / x.dim(0).max(1) as f64)
}

/// Mean [`distortion`] over `(n, τ, d)` windows.
pub fn mean_distortion(x: &Tensor, x_tilde: &Tensor) -> Result<f64> {
    if x.shape() != x_tilde.shape() || x.ndim() != 3 || x.dim(0) == 0 {
        return Err(Error::shape(
            "mean_distortion",
            format!("expected two non-empty (n, τ, d) batches, got {:?} and {:?}", x.shape(), x_tilde.shape()),
        ));
    }
    let mut total = 0.0;
    for i in 0..x.dim(0) {
        total += distortion(&x.index0(i), &x_tilde.index0(i))?;
    }
    Ok(total / x.dim(0) as f64)
}
