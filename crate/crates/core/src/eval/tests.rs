use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::data::{gen_sines, Normalizer};
use crate::tokenizer::{TokenizerConfig, MultiScaleTokenizer};

fn sines(n: usize, seed: u64) -> Tensor {
    let ds = gen_sines(n, 24, 3, seed).unwrap();
    Normalizer::from_bounds(vec![-1.0; 3], vec![1.0; 3]).unwrap().normalize(&ds.windows).unwrap()
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m = a.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i][i]).collect(), v)
}

fn jacobi_sqrt(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (vals, vecs) = jacobi_eigen(a);
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            out[i][j] = (0..n).map(|k| vecs[i][k] * vals[k].max(0.0).sqrt() * vecs[j][k]).sum();
        }
    }
    out
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect()).collect()
}

fn frechet_oracle(mu1: &[f64], s1: &[Vec<f64>], mu2: &[f64], s2: &[Vec<f64>]) -> f64 {
    let r = jacobi_sqrt(s1);
    let inner = matmul(&matmul(&r, s2), &r);
    let cross: f64 = jacobi_eigen(&inner).0.iter().map(|v| v.max(0.0).sqrt()).sum();
    let n = mu1.len();
    let mean: f64 = (0..n).map(|i| (mu1[i] - mu2[i]).powi(2)).sum();
    mean + (0..n).map(|i| s1[i][i] + s2[i][i]).sum::<f64>() - 2.0 * cross
}

fn random_spd<R: Rng>(n: usize, r: &mut R) -> Vec<Vec<f64>> {
    let a: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * a[j][k]).sum::<f64>() + if i == j { 0.1 } else { 0.0 }).collect())
        .collect()
}

fn to_dmatrix(a: &[Vec<f64>]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), a.len(), |i, j| a[i][j])
}

#[test]
fn report_mean_and_std() {
    let r = MetricReport::from_values("m", vec![1.0, 2.0, 3.0], serde_json::Value::Null);
    assert_eq!(r.mean, 2.0);
    assert_eq!(r.std, 1.0);
    assert_eq!(MetricReport::single("s", 4.0, serde_json::Value::Null).std, 0.0);
}

#[test]
fn frechet_identical_sets_vanish() {
    let x = sines(60, 1);
    assert!(feature_frechet_score(&x, &x).unwrap() <= 1e-8);
}

#[test]
fn frechet_mean_shift_closed_form() {
    let eye = DMatrix::<f64>::identity(4, 4);
    let mu1 = DVector::zeros(4);
    let mut mu2 = DVector::zeros(4);
    mu2[2] = 1.7;
    assert!((frechet_distance(&mu1, &eye, &mu2, &eye) - 1.7 * 1.7).abs() <= 1e-12);
}

#[test]
fn frechet_matches_jacobi_oracle() {
    let mut r = crate::rng::seeded(2);
    for _ in 0..30 {
        let n = r.gen_range(1..8);
        let (s1, s2) = (random_spd(n, &mut r), random_spd(n, &mut r));
        let mu1: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mu2: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let got = frechet_distance(
            &DVector::from_vec(mu1.clone()),
            &to_dmatrix(&s1),
            &DVector::from_vec(mu2.clone()),
            &to_dmatrix(&s2),
        );
        let want = frechet_oracle(&mu1, &s1, &mu2, &s2);
        assert!((got - want).abs() <= 1e-6, "{got} vs {want}");
    }
}

#[test]
fn frechet_is_symmetric_and_separates() {
    let a = sines(80, 3);
    let b = sines(80, 4);
    let noise = uniform_noise_like(&a, 5).unwrap();
    let ab = feature_frechet_score(&a, &b).unwrap();
    let ba = feature_frechet_score(&b, &a).unwrap();
    assert!((ab - ba).abs() <= 1e-8);
    assert!(feature_frechet_score(&a, &noise).unwrap() > ab);
    assert!(feature_frechet_score(&a, &sines(1, 0)).is_err());
}

#[test]
fn features_layout() {
    let x = Tensor::new(vec![1, 4, 1], vec![1.0, 3.0, 1.0, 3.0]).unwrap();
    let f = window_features(&x).unwrap();
    assert_eq!(f.ncols(), 7);
    assert_eq!(f[(0, 0)], 2.0);
    assert_eq!(f[(0, 1)], 1.0);
    assert_eq!(f[(0, 2)], -0.75);
    assert_eq!(f[(0, 3)], 0.5);
    assert_eq!(f[(0, 6)], 0.0);
}

#[test]
fn histogram_examples() {
    let x = sines(20, 6);
    assert_eq!(marginal_hist_distance(&x, &x, 50).unwrap(), 0.0);
    let a = Tensor::full(&[2, 3, 1], 0.0);
    let b = Tensor::full(&[2, 3, 1], 1.0);
    assert_eq!(marginal_hist_distance(&a, &b, 10).unwrap(), 1.0);
    assert!(marginal_hist_distance(&a, &b, 1).is_err());
}

#[test]
fn histogram_matches_naive_oracle() {
    let mut r = crate::rng::seeded(7);
    for _ in 0..100 {
        let bins = r.gen_range(2..20);
        let (lo, hi) = (r.gen_range(-3.0..0.0), r.gen_range(0.5..3.0));
        let width = (hi - lo) / bins as f64;
        // values kept away from bin edges; the extremes pin the pooled range
        let mut draw = |n: usize| -> (Vec<f64>, Vec<usize>) {
            let mut vals = Vec::new();
            let mut which = Vec::new();
            for _ in 0..n {
                let j = r.gen_range(0..bins);
                vals.push(lo + (j as f64 + r.gen_range(0.1..0.9)) * width);
                which.push(j);
            }
            (vals, which)
        };
        let (mut a, mut ja) = draw(30);
        let (b, jb) = draw(45);
        a.extend([lo, hi]);
        ja.extend([0, bins - 1]);
        let mut ca = vec![0.0; bins];
        let mut cb = vec![0.0; bins];
        ja.iter().for_each(|&j| ca[j] += 1.0);
        jb.iter().for_each(|&j| cb[j] += 1.0);
        let tv: f64 = 0.5 * (0..bins).map(|j| (ca[j] / a.len() as f64 - cb[j] / b.len() as f64).abs()).sum::<f64>();
        let ta = Tensor::new(vec![a.len(), 1], a).unwrap();
        let tb = Tensor::new(vec![b.len(), 1], b).unwrap();
        assert_eq!(marginal_hist_distance(&ta, &tb, bins).unwrap(), tv);
    }
}

#[test]
fn noise_respects_feature_ranges() {
    let x = sines(10, 8);
    let n = uniform_noise_like(&x, 1).unwrap();
    assert_eq!(n.shape(), x.shape());
    assert_eq!(n, uniform_noise_like(&x, 1).unwrap());
    assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn codebook_usage_bounds() {
    let mut r = crate::rng::seeded(9);
    let cfg = TokenizerConfig {
        channels: 3,
        window: 24,
        factors: vec![2, 4],
        vocab: vec![1, 16],
        code_dim: 4,
        hidden: 4,
        ..TokenizerConfig::default()
    };
    let tok = MultiScaleTokenizer::new(cfg, &mut r).unwrap();
    let usage = codebook_usage_pct(&tok, &sines(30, 1)).unwrap();
    assert_eq!(usage[0], 1.0);
    assert!(usage[1] >= 1.0 / 16.0 && usage[1] <= 1.0);
    assert!(codebook_usage_pct(&tok, &Tensor::zeros(&[0, 24, 3])).is_err());
}

fn quick() -> PostHocConfig {
    PostHocConfig {
        steps: 300,
        batch_size: 64,
        hidden: 16,
        repeats: 2,
        ..PostHocConfig::default()
    }
}

#[test]
fn discriminative_baselines() {
    let real = sines(400, 10);
    let other = sines(400, 11);
    let noise = uniform_noise_like(&real, 3).unwrap();
    let same = discriminative_score(&real, &other, &quick()).unwrap();
    let sep = discriminative_score(&real, &noise, &quick()).unwrap();
    assert_eq!(same.values.len(), 2);
    assert!(same.values.iter().all(|&v| (0.0..=0.5).contains(&v)));
    assert!(same.mean <= 0.1, "{}", same.mean);
    assert!(sep.mean >= 0.4, "{}", sep.mean);
    assert_eq!(same, discriminative_score(&real, &other, &quick()).unwrap());
}

#[test]
fn discriminative_needs_enough_windows() {
    let err = discriminative_score(&sines(19, 1), &sines(40, 2), &quick());
    assert!(matches!(err, Err(Error::InsufficientData(_))));
}

#[test]
fn predictive_baselines() {
    let real = sines(200, 12);
    let cfg = PostHocConfig { repeats: 1, ..quick() };
    let score = predictive_score(&real, &real, &cfg).unwrap();
    assert!(score.mean >= 0.0);
    assert_eq!(score, predictive_score(&real, &real, &cfg).unwrap());

    let constant = Tensor::full(&[50, 24, 3], 0.3);
    let flat = predictive_score(&constant, &constant, &PostHocConfig { steps: 1000, ..cfg.clone() }).unwrap();
    assert!(flat.mean < 0.02, "{}", flat.mean);

    let short = Tensor::zeros(&[30, 1, 3]);
    assert!(matches!(predictive_score(&short, &short, &cfg), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prop_histogram_in_unit_interval(seed in any::<u64>(), bins in 2usize..60) {
        let mut r = crate::rng::seeded(seed);
        let a = Tensor::uniform(&[5, 4, 2], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[7, 4, 2], 0.0, 2.0, &mut r);
        let d = marginal_hist_distance(&a, &b, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn prop_frechet_non_negative_and_symmetric(seed in any::<u64>()) {
        let mut r = crate::rng::seeded(seed);
        let a = Tensor::uniform(&[12, 8, 2], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[9, 8, 2], -1.0, 1.0, &mut r);
        let ab = feature_frechet_score(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - feature_frechet_score(&b, &a).unwrap()).abs() <= 1e-8);
    }
}
