use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const AUTOCORR_LAGS: usize = 5;
pub const COV_RIDGE: f64 = 1e-6;

/// Per channel: mean, standard deviation and autocorrelation at lags
/// `1..=5`. Returns an `(n, 7·d)` matrix.
pub fn window_features(x: &Tensor) -> Result<DMatrix<f64>> {
    if x.ndim() != 3 {
        return Err(Error::shape("window_features", format!("expected (n, τ, d), got {:?}", x.shape())));
    }
    let (n, tau, d) = (x.dim(0), x.dim(1), x.dim(2));
    let per = 2 + AUTOCORR_LAGS;
    let mut out = DMatrix::zeros(n, per * d);
    let mut series = vec![0.0; tau];
    for w in 0..n {
        for c in 0..d {
            for (t, s) in series.iter_mut().enumerate() {
                *s = x.data()[(w * tau + t) * d + c];
            }
            let mean = series.iter().sum::<f64>() / tau as f64;
            let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            out[(w, c * per)] = mean;
            out[(w, c * per + 1)] = (var / tau as f64).sqrt();
            for lag in 1..=AUTOCORR_LAGS {
                let ac = if var > 0.0 && lag < tau {
                    (0..tau - lag).map(|t| (series[t] - mean) * (series[t + lag] - mean)).sum::<f64>() / var
                } else {
                    0.0
                };
                out[(w, c * per + 1 + lag)] = ac;
            }
        }
    }
    Ok(out)
}

/// Column means and unbiased covariance of the rows of `f`.
pub fn gaussian_stats(f: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = f.nrows();
    let mean = f.row_mean().transpose();
    let mut centered = f.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n.saturating_sub(1).max(1)) as f64;
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, with `tr (Σ₁Σ₂)^{1/2}`
/// evaluated as `tr (Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}`.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let root1 = sym_sqrt(s1);
    let mut inner = &root1 * s2 * &root1;
    // symmetrize away rounding before the eigensolve
    inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_cross;
    d.max(0.0)
}

/// Fréchet distance between Gaussian fits of [`window_features`], with a
/// `1e-6·I` ridge on both covariances.
pub fn feature_frechet_score(real: &Tensor, synth: &Tensor) -> Result<f64> {
    if real.ndim() != 3 || synth.ndim() != 3 || real.shape()[1..] != synth.shape()[1..] {
        return Err(Error::shape(
            "feature_frechet_score",
            format!("windows {:?} and {:?} differ in (τ, d)", real.shape(), synth.shape()),
        ));
    }
    if real.dim(0) < 2 || synth.dim(0) < 2 {
        return Err(Error::InsufficientData("Fréchet score needs at least 2 windows per side".into()));
    }
    let (mu1, mut s1) = gaussian_stats(&window_features(real)?);
    let (mu2, mut s2) = gaussian_stats(&window_features(synth)?);
    let ridge = DMatrix::identity(s1.nrows(), s1.ncols()) * COV_RIDGE;
    s1 += &ridge;
    s2 += &ridge;
    Ok(frechet_distance(&mu1, &s1, &mu2, &s2))
}
