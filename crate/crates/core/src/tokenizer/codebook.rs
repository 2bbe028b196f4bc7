use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// How an encoded frame picks its codebook entry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// `argmax_v ⟨h, c_v⟩`.
    #[default]
    InnerProduct,
    /// `argmin_v ‖h − c_v‖²` (ablation).
    Distance,
}

/// `V × d_c` embedding table with smoothed per-entry usage counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    vectors: Tensor,
    usage: Vec<f64>,
    unit_norm: bool,
}

fn normalize_row(row: &mut [f64]) {
    let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        row.iter_mut().for_each(|x| *x /= n);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Codebook {
    /// Usage every entry starts with; equal to the default reset threshold
    /// so nothing is reset before it has had a chance to be selected.
    pub const INITIAL_USAGE: f64 = 1.0;

    pub fn new(vectors: Tensor, unit_norm: bool) -> Result<Self> {
        if vectors.ndim() != 2 {
            return Err(Error::shape("codebook", format!("expected (V, d_c), got {:?}", vectors.shape())));
        }
        let v = vectors.dim(0);
        let mut cb = Self {
            vectors,
            usage: vec![Self::INITIAL_USAGE; v],
            unit_norm,
        };
        cb.renormalize();
        Ok(cb)
    }

    pub fn random<R: Rng + ?Sized>(size: usize, dim: usize, unit_norm: bool, rng: &mut R) -> Self {
        Self::new(Tensor::uniform(&[size, dim], -1.0, 1.0, rng), unit_norm).expect("2D table")
    }

    /// Restores a saved table and usage vector verbatim.
    pub fn from_parts(vectors: Tensor, usage: Vec<f64>, unit_norm: bool) -> Result<Self> {
        if vectors.ndim() != 2 || usage.len() != vectors.dim(0) {
            return Err(Error::shape(
                "codebook",
                format!("table {:?} with {} usage entries", vectors.shape(), usage.len()),
            ));
        }
        Ok(Self {
            vectors,
            usage,
            unit_norm,
        })
    }

    pub fn size(&self) -> usize {
        self.vectors.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim(1)
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    /// Mutable table access for gradient-updated codebooks.
    pub fn vectors_mut(&mut self) -> &mut Tensor {
        &mut self.vectors
    }

    pub fn usage(&self) -> &[f64] {
        &self.usage
    }

    pub fn unit_norm(&self) -> bool {
        self.unit_norm
    }

    pub fn row(&self, v: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[v * d..(v + 1) * d]
    }

    /// Rescales every row to unit length when the unit-norm policy is on.
    pub fn renormalize(&mut self) {
        if self.unit_norm {
            let d = self.dim();
            for row in self.vectors.data_mut().chunks_mut(d.max(1)) {
                normalize_row(row);
            }
        }
    }

    fn check_width(&self, h: &Tensor) -> Result<()> {
        if self.size() == 0 {
            return Err(Error::Config("codebook is empty".into()));
        }
        if h.ndim() == 0 || h.shape()[h.ndim() - 1] != self.dim() {
            return Err(Error::shape(
                "quantize",
                format!("rows of width {} expected, got {:?}", self.dim(), h.shape()),
            ));
        }
        Ok(())
    }

    /// One token per row of `h: (…, d_c)`; ties go to the smallest index.
    pub fn quantize(&self, h: &Tensor, similarity: Similarity) -> Result<Vec<usize>> {
        self.check_width(h)?;
        let d = self.dim();
        let tokens = h
            .data()
            .chunks(d)
            .map(|row| {
                let mut best = 0;
                let mut best_score = f64::NEG_INFINITY;
                for v in 0..self.size() {
                    let c = self.row(v);
                    let score = match similarity {
                        Similarity::InnerProduct => dot(row, c),
                        Similarity::Distance => {
                            -row.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                        }
                    };
                    if score > best_score {
                        best = v;
                        best_score = score;
                    }
                }
                best
            })
            .collect();
        Ok(tokens)
    }

    /// `(n, d_c)` table rows for `tokens`.
    pub fn dequantize(&self, tokens: &[usize]) -> Result<Tensor> {
        let d = self.dim();
        let mut out = Vec::with_capacity(tokens.len() * d);
        for (position, &t) in tokens.iter().enumerate() {
            if t >= self.size() {
                return Err(Error::TokenOutOfRange {
                    position,
                    value: t,
                    limit: self.size(),
                });
            }
            out.extend_from_slice(self.row(t));
        }
        Tensor::new(vec![tokens.len(), d], out)
    }

    /// `n_v`: how many times each entry occurs in `tokens`.
    pub fn batch_counts(&self, tokens: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.size()];
        for &t in tokens {
            counts[t] += 1;
        }
        counts
    }

    /// Moves each selected entry towards the mean of the frames assigned to
    /// it: `c ← (1−β)·c + β·h̄`. Unselected entries are untouched.
    pub fn ema_update(&mut self, tokens: &[usize], h: &Tensor, beta: f64) -> Result<()> {
        self.check_width(h)?;
        let d = self.dim();
        if h.numel() / d != tokens.len() {
            return Err(Error::LengthMismatch {
                expected: tokens.len(),
                actual: h.numel() / d,
            });
        }
        let mut sums = vec![0.0; self.size() * d];
        let mut counts = vec![0usize; self.size()];
        for (position, (row, &t)) in h.data().chunks(d).zip(tokens).enumerate() {
            if t >= self.size() {
                return Err(Error::TokenOutOfRange {
                    position,
                    value: t,
                    limit: self.size(),
                });
            }
            counts[t] += 1;
            for (s, x) in sums[t * d..(t + 1) * d].iter_mut().zip(row) {
                *s += x;
            }
        }
        let unit = self.unit_norm;
        for (v, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let row = &mut self.vectors.data_mut()[v * d..(v + 1) * d];
            for (c, s) in row.iter_mut().zip(&sums[v * d..(v + 1) * d]) {
                *c = (1.0 - beta) * *c + beta * (s / n as f64);
            }
            if unit {
                normalize_row(row);
            }
        }
        Ok(())
    }

    /// `u ← (1−β)·u + β·n` for every entry.
    pub fn usage_update(&mut self, counts: &[usize], beta: f64) -> Result<()> {
        if counts.len() != self.size() {
            return Err(Error::LengthMismatch {
                expected: self.size(),
                actual: counts.len(),
            });
        }
        for (u, &n) in self.usage.iter_mut().zip(counts) {
            *u = (1.0 - beta) * *u + beta * n as f64;
        }
        Ok(())
    }

    /// Replaces every entry whose usage is below `threshold` by a uniformly
    /// drawn row of `h`. Returns how many entries were replaced.
    pub fn reset<R: Rng + ?Sized>(&mut self, h: &Tensor, threshold: f64, rng: &mut R) -> Result<usize> {
        let stale: Vec<usize> = (0..self.size()).filter(|&v| self.usage[v] < threshold).collect();
        if stale.is_empty() {
            return Ok(0);
        }
        let d = self.dim();
        let rows = if h.numel() == 0 { 0 } else { h.numel() / d };
        if rows == 0 {
            return Err(Error::TrainingState(format!(
                "{} codebook entries need a reset but no encodings are available",
                stale.len()
            )));
        }
        self.check_width(h)?;
        let unit = self.unit_norm;
        for &v in &stale {
            let j = rng.gen_range(0..rows);
            let src = &h.data()[j * d..(j + 1) * d];
            let row = &mut self.vectors.data_mut()[v * d..(v + 1) * d];
            row.copy_from_slice(src);
            if unit {
                normalize_row(row);
            }
        }
        Ok(stale.len())
    }

    /// Overwrites the table with `V` rows drawn from `h` (without
    /// replacement when there are enough rows) and resets usage.
    pub fn init_from<R: Rng + ?Sized>(&mut self, h: &Tensor, rng: &mut R) -> Result<()> {
        self.check_width(h)?;
        let d = self.dim();
        let rows = h.numel() / d;
        if rows == 0 {
            return Err(Error::TrainingState("cannot initialize a codebook from zero encodings".into()));
        }
        let picks: Vec<usize> = if rows >= self.size() {
            index::sample(rng, rows, self.size()).into_vec()
        } else {
            (0..self.size()).map(|_| rng.gen_range(0..rows)).collect()
        };
        for (v, j) in picks.into_iter().enumerate() {
            self.vectors.data_mut()[v * d..(v + 1) * d].copy_from_slice(&h.data()[j * d..(j + 1) * d]);
        }
        self.usage.fill(Self::INITIAL_USAGE);
        self.renormalize();
        Ok(())
    }
}
