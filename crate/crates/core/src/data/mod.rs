//! Windowed datasets, CSV ingestion, min-max normalization and the
//! synthetic sine generator.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// `n` windows of shape `(τ, d)` stored as one `(n, τ, d)` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    pub windows: Tensor,
    pub features: Vec<String>,
}

impl TimeSeriesDataset {
    pub fn new(windows: Tensor, features: Vec<String>) -> Result<Self> {
        if windows.ndim() != 3 {
            return Err(Error::shape("dataset", format!("expected (n, τ, d), got {:?}", windows.shape())));
        }
        if features.len() != windows.dim(2) {
            return Err(Error::LengthMismatch {
                expected: windows.dim(2),
                actual: features.len(),
            });
        }
        Ok(Self { windows, features })
    }

    pub fn len(&self) -> usize {
        self.windows.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window_len(&self) -> usize {
        self.windows.dim(1)
    }

    pub fn channels(&self) -> usize {
        self.windows.dim(2)
    }

    pub fn window(&self, i: usize) -> Tensor {
        self.windows.index0(i)
    }

    /// First `⌊frac·n⌋` windows and the rest, in index order.
    pub fn split(&self, frac: f64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&frac) {
            return Err(Error::Config(format!("split fraction {frac} outside [0, 1]")));
        }
        let cut = (frac * self.len() as f64).floor() as usize;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        Ok((self.select(&head), self.select(&tail)))
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            windows: gather(&self.windows, idx),
            features: self.features.clone(),
        }
    }
}

/// Gathers rows `idx` of `data: (n, …)` into `(idx.len(), …)`.
pub fn gather(data: &Tensor, idx: &[usize]) -> Tensor {
    let per = data.numel() / data.dim(0).max(1);
    let mut out = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        out.extend_from_slice(&data.data()[i * per..(i + 1) * per]);
    }
    let mut shape = data.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, out).expect("gathered rows")
}

fn default_features(d: usize) -> Vec<String> {
    (0..d).map(|i| format!("x{i}")).collect()
}

/// Cuts `(rows, d)` data into windows of length `window` every `stride` rows.
pub fn sliding_windows(rows: &[Vec<f64>], window: usize, stride: usize) -> Result<Tensor> {
    if window == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be positive".into()));
    }
    if rows.len() < window {
        return Err(Error::InsufficientData(format!(
            "{} rows is fewer than the window length {window}",
            rows.len()
        )));
    }
    let d = rows[0].len();
    let count = (rows.len() - window) / stride + 1;
    let mut data = Vec::with_capacity(count * window * d);
    for w in 0..count {
        for row in &rows[w * stride..w * stride + window] {
            data.extend_from_slice(row);
        }
    }
    Tensor::new(vec![count, window, d], data)
}

/// Reads a numeric CSV with a header row.
pub fn load_csv(path: &Path, window: usize, stride: usize) -> Result<TimeSeriesDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 0, 0, e))?;
    let features: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, 0, 0, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        // data rows are numbered from 1, after the header
        let row = r + 1;
        let record = record.map_err(|e| csv_error(path, row, 0, e))?;
        if record.len() != features.len() {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                row,
                column: record.len().min(features.len()),
                message: format!("expected {} fields, found {}", features.len(), record.len()),
            });
        }
        let values = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Csv {
                        path: path.to_path_buf(),
                        row,
                        column: c,
                        message: format!("`{cell}` is not a finite number"),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(values);
    }
    let windows = sliding_windows(&rows, window, stride)?;
    TimeSeriesDataset::new(windows, features)
}

fn csv_error(path: &Path, row: usize, column: usize, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        row,
        column,
        message: e.to_string(),
    }
}

/// Writes `(τ, d)` windows as a long-format CSV: `sample,t,<features…>`.
pub fn write_windows_csv(path: &Path, windows: &Tensor, features: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, 0, 0, e))?;
    let mut header = vec!["sample".to_string(), "t".to_string()];
    header.extend(features.iter().cloned());
    w.write_record(&header).map_err(|e| csv_error(path, 0, 0, e))?;
    let (n, tau, d) = (windows.dim(0), windows.dim(1), windows.dim(2));
    for s in 0..n {
        for t in 0..tau {
            let off = (s * tau + t) * d;
            let mut rec = vec![s.to_string(), t.to_string()];
            rec.extend(windows.data()[off..off + d].iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_error(path, s * tau + t + 1, 0, e))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads windows written by [`write_windows_csv`]; `τ` is inferred from the
/// rows of sample 0.
pub fn read_windows_csv(path: &Path) -> Result<TimeSeriesDataset> {
    let flat = load_csv(path, 1, 1)?;
    if flat.features.len() < 3 || flat.features[0] != "sample" || flat.features[1] != "t" {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            row: 0,
            column: 0,
            message: "expected a `sample,t,<features…>` header".into(),
        });
    }
    let width = flat.features.len();
    let d = width - 2;
    let rows: Vec<&[f64]> = flat.windows.data().chunks(width).collect();
    let tau = rows.iter().take_while(|r| r[0] == 0.0).count();
    if tau == 0 {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            row: 1,
            column: 0,
            message: "first row must belong to sample 0".into(),
        });
    }
    if rows.len() % tau != 0 {
        return Err(Error::LengthMismatch {
            expected: rows.len().div_ceil(tau) * tau,
            actual: rows.len(),
        });
    }
    let mut data = Vec::with_capacity(rows.len() * d);
    for (i, r) in rows.iter().enumerate() {
        let (s, t) = (i / tau, i % tau);
        if r[0] != s as f64 || r[1] != t as f64 {
            return Err(Error::Csv {
                path: path.to_path_buf(),
                row: i + 1,
                column: if r[0] != s as f64 { 0 } else { 1 },
                message: format!("expected sample {s}, t {t}"),
            });
        }
        data.extend_from_slice(&r[2..]);
    }
    TimeSeriesDataset::new(
        Tensor::new(vec![rows.len() / tau, tau, d], data)?,
        flat.features[2..].to_vec(),
    )
}

/// One sine draw: frequency in cycles per window and phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SineParams {
    pub eta: f64,
    pub theta: f64,
}

impl SineParams {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            eta: rng.gen_range(0.0..1.0),
            theta: rng.gen_range(-PI..PI),
        }
    }

    /// `sin(2πη·j/τ + θ)` for `j = 0..τ`.
    pub fn series(&self, window: usize) -> impl Iterator<Item = f64> + '_ {
        (0..window).map(move |j| (2.0 * PI * self.eta * j as f64 / window as f64 + self.theta).sin())
    }
}

/// `n` windows of `d` independent sinusoids with `η ~ U[0, 1)` and
/// `θ ~ U[−π, π)`, time measured in window lengths.
pub fn gen_sines(n: usize, window: usize, channels: usize, seed: u64) -> Result<TimeSeriesDataset> {
    if n == 0 || window == 0 || channels == 0 {
        return Err(Error::Config("sines: n, window and channels must be positive".into()));
    }
    let mut r = rng::seeded(seed);
    let mut data = vec![0.0; n * window * channels];
    for s in 0..n {
        for c in 0..channels {
            let p = SineParams::draw(&mut r);
            for (j, v) in p.series(window).enumerate() {
                data[(s * window + j) * channels + c] = v;
            }
        }
    }
    TimeSeriesDataset::new(Tensor::new(vec![n, window, channels], data)?, default_features(channels))
}

/// Per-feature min-max scaling to `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    min: Option<Vec<f64>>,
    max: Option<Vec<f64>>,
}

impl Normalizer {
    /// Fits on windows `(n, τ, d)`.
    pub fn fit(windows: &Tensor) -> Result<Self> {
        if windows.ndim() != 3 || windows.numel() == 0 {
            return Err(Error::InsufficientData("normalizer needs at least one window".into()));
        }
        let d = windows.dim(2);
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for row in windows.data().chunks(d) {
            for c in 0..d {
                lo[c] = lo[c].min(row[c]);
                hi[c] = hi[c].max(row[c]);
            }
        }
        Ok(Self {
            min: Some(lo),
            max: Some(hi),
        })
    }

    pub fn from_bounds(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() {
            return Err(Error::LengthMismatch {
                expected: min.len(),
                actual: max.len(),
            });
        }
        if let Some(c) = (0..min.len()).find(|&c| max[c] < min[c]) {
            return Err(Error::Config(format!("feature {c}: max {} < min {}", max[c], min[c])));
        }
        Ok(Self {
            min: Some(min),
            max: Some(max),
        })
    }

    pub fn is_fitted(&self) -> bool {
        self.min.is_some()
    }

    pub fn bounds(&self) -> Result<(&[f64], &[f64])> {
        match (&self.min, &self.max) {
            (Some(lo), Some(hi)) => Ok((lo, hi)),
            _ => Err(Error::NotFitted),
        }
    }

    fn apply(&self, x: &Tensor, forward: bool) -> Result<Tensor> {
        let (lo, hi) = self.bounds()?;
        let d = lo.len();
        if x.ndim() == 0 || x.shape()[x.ndim() - 1] != d {
            return Err(Error::shape("normalizer", format!("last dim {d} expected, got {:?}", x.shape())));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for c in 0..d {
                let span = hi[c] - lo[c];
                row[c] = match (forward, span > 0.0) {
                    (true, true) => (row[c] - lo[c]) / span,
                    // constant features normalize to 0 and map back to the constant
                    (true, false) => 0.0,
                    (false, true) => row[c] * span + lo[c],
                    (false, false) => lo[c],
                };
            }
        }
        Ok(out)
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, true)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, false)
    }
}

/// Dataset description written alongside runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub window: usize,
    pub channels: usize,
    pub windows: usize,
    pub features: Vec<String>,
    pub normalizer: Normalizer,
}
