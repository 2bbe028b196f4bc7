//! Fast invariant suites with their own reference implementations.

use std::time::Instant;

use msdformer::autodiff::Tensor;
use msdformer::generate::allocate_tokens;
use msdformer::nn::gradient_suite;
use msdformer::rng;
use msdformer::seqmodel::{concat_scales, shift_tokens, type_ids, TokenVocabulary};
use msdformer::theory;
use msdformer::tokenizer::{reconstruct, Codebook, Similarity};
use rand::Rng;
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelfTestReport {
    pub suites: Vec<SuiteResult>,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    pub fn failures(&self) -> Vec<String> {
        self.suites.iter().filter(|s| !s.passed).map(|s| s.name.to_string()).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.suites {
            s.push_str(&format!(
                "{} {:<16} {} ({:.1}s)\n",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.detail,
                r.seconds
            ));
        }
        let failed = self.failures().len();
        s.push_str(&format!("{} of {} suites passed\n", self.suites.len() - failed, self.suites.len()));
        s
    }
}

type Check = fn(u64) -> Result<String, String>;

pub const SUITES: &[(&str, Check)] = &[
    ("gradients", gradients),
    ("quantize", quantize),
    ("token-plumbing", plumbing),
    ("single-scale", single_scale),
    ("rate", rate),
    ("codebook-update", codebook_update),
    ("aggregation", aggregation),
];

pub fn run_all(seed: u64) -> SelfTestReport {
    let suites = SUITES
        .iter()
        .map(|(name, check)| {
            let t = Instant::now();
            let (passed, detail) = match check(seed) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            SuiteResult {
                name,
                passed,
                detail,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect();
    SelfTestReport { suites }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradients(seed: u64) -> Result<String, String> {
    let reports = gradient_suite(10, seed).map_err(|e| e.to_string())?;
    let worst = reports.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error)).ok_or("empty suite")?;
    ensure(worst.max_error <= 1e-4, || format!("{} relative error {:.2e}", worst.name, worst.max_error))?;
    Ok(format!("{} primitives, worst {:.2e} ({})", reports.len(), worst.max_error, worst.name))
}

fn quantize(seed: u64) -> Result<String, String> {
    let mut r = rng::stream(seed, 100);
    for case in 0..10_000 {
        let (v, d) = (r.gen_range(1..20), r.gen_range(1..8));
        let table = Tensor::uniform(&[v, d], -1.0, 1.0, &mut r);
        let h = Tensor::uniform(&[1, d], -1.0, 1.0, &mut r);
        let cb = Codebook::new(table.clone(), false).map_err(|e| e.to_string())?;
        let got = cb.quantize(&h, Similarity::InnerProduct).map_err(|e| e.to_string())?[0];
        let mut best = (0, f64::NEG_INFINITY);
        for j in 0..v {
            let s: f64 = (0..d).map(|i| h.data()[i] * table.data()[j * d + i]).sum();
            if s > best.1 {
                best = (j, s);
            }
        }
        ensure(got == best.0, || format!("case {case}: got {got}, argmax {}", best.0))?;
    }
    Ok("10000 cases agree with exhaustive argmax".into())
}

fn plumbing(seed: u64) -> Result<String, String> {
    let mut r = rng::stream(seed, 101);
    for case in 0..1000 {
        let k = r.gen_range(1..5);
        let sizes: Vec<usize> = (0..k).map(|_| r.gen_range(1..300)).collect();
        let lengths: Vec<usize> = (0..k).map(|_| r.gen_range(1..20)).collect();
        let vocab = TokenVocabulary::new(sizes.clone()).map_err(|e| e.to_string())?;
        ensure(vocab.bos() == sizes.iter().sum::<usize>(), || format!("case {case}: BOS {}", vocab.bos()))?;
        let raw: Vec<Vec<usize>> = (0..k).map(|s| (0..lengths[s]).map(|_| r.gen_range(0..sizes[s])).collect()).collect();
        let shifted = (0..k)
            .map(|s| shift_tokens(&raw[s], &vocab, s))
            .collect::<msdformer::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let (back, clamped) = allocate_tokens(&concat_scales(&shifted), &vocab, &lengths).map_err(|e| e.to_string())?;
        ensure(back == raw && clamped == 0, || format!("case {case}: round trip differs"))?;
    }
    Ok("1000 configurations round-trip; BOS = ΣV".into())
}

fn single_scale(seed: u64) -> Result<String, String> {
    let mut r = rng::stream(seed, 102);
    for _ in 0..100 {
        let (v, l) = (r.gen_range(1..1000), r.gen_range(1..50));
        let vocab = TokenVocabulary::new(vec![v]).map_err(|e| e.to_string())?;
        let raw: Vec<usize> = (0..l).map(|_| r.gen_range(0..v)).collect();
        ensure(shift_tokens(&raw, &vocab, 0).ok().as_ref() == Some(&raw), || "K=1 shift is not the identity".into())?;
        ensure(vocab.bos() == v, || "K=1 BOS differs from V".into())?;
        let ids = type_ids(&[l]);
        ensure(ids[0] == 0 && ids[1..].iter().all(|&t| t == 1), || "K=1 type ids".into())?;
    }
    Ok("offsets vanish and one type id remains besides BOS".into())
}

fn rate(_: u64) -> Result<String, String> {
    ensure(theory::rate(6, 512) == 54.0, || "rate(6, 512) != 54".into())?;
    ensure(theory::min_codebook_size(54.0, 6).ok() == Some(512), || "min_codebook_size(54, 6) != 512".into())?;
    let report = theory::compare_rates(&theory::default_sweep());
    ensure(report.violations() == 0, || format!("{} violations", report.violations()))?;
    Ok(format!("{} admissible configurations, multi-scale rate always larger", report.rows.len()))
}

fn codebook_update(seed: u64) -> Result<String, String> {
    let mut r = rng::stream(seed, 103);
    for case in 0..200 {
        let (v, d, n) = (r.gen_range(1..10), r.gen_range(1..6), r.gen_range(1..30));
        let beta = r.gen_range(0.001..0.999);
        let table = Tensor::uniform(&[v, d], -1.0, 1.0, &mut r);
        let usage: Vec<f64> = (0..v).map(|_| r.gen_range(0.0..5.0)).collect();
        let h = Tensor::uniform(&[n, d], -1.0, 1.0, &mut r);
        let tokens: Vec<usize> = (0..n).map(|_| r.gen_range(0..v)).collect();
        let mut cb = Codebook::from_parts(table.clone(), usage.clone(), false).map_err(|e| e.to_string())?;
        cb.ema_update(&tokens, &h, beta).map_err(|e| e.to_string())?;
        let counts = cb.batch_counts(&tokens);
        cb.usage_update(&counts, beta).map_err(|e| e.to_string())?;
        for j in 0..v {
            let members: Vec<usize> = (0..n).filter(|&i| tokens[i] == j).collect();
            for c in 0..d {
                let old = table.data()[j * d + c];
                let want = if members.is_empty() {
                    old
                } else {
                    let mean = members.iter().map(|&i| h.data()[i * d + c]).sum::<f64>() / members.len() as f64;
                    (1.0 - beta) * old + beta * mean
                };
                let got = cb.vectors().data()[j * d + c];
                ensure((got - want).abs() <= 1e-12, || format!("case {case}: entry {j} off by {:e}", got - want))?;
            }
            let want = (1.0 - beta) * usage[j] + beta * members.len() as f64;
            ensure((cb.usage()[j] - want).abs() <= 1e-12, || format!("case {case}: usage {j}"))?;
        }
    }
    Ok("EMA vectors and usage match scalar updates within 1e-12".into())
}

fn aggregation(seed: u64) -> Result<String, String> {
    let mut r = rng::stream(seed, 104);
    for case in 0..200 {
        let (k, tau, d) = (r.gen_range(1..5), r.gen_range(1..30), r.gen_range(1..6));
        let parts: Vec<Tensor> = (0..k).map(|_| Tensor::uniform(&[tau, d], -1.0, 1.0, &mut r)).collect();
        let sum = reconstruct(&parts).map_err(|e| e.to_string())?;
        for i in 0..tau * d {
            let want: f64 = parts.iter().map(|p| p.data()[i]).sum();
            ensure((sum.data()[i] - want).abs() <= 1e-12, || format!("case {case}: element {i}"))?;
        }
    }
    Ok("scale sum matches element-wise addition within 1e-12".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cheap_suites_pass() {
        for (name, check) in SUITES.iter().filter(|(n, _)| *n != "gradients") {
            assert!(check(0).is_ok(), "{name}: {:?}", check(0));
        }
    }

    #[test]
    fn render_counts_failures() {
        let report = SelfTestReport {
            suites: vec![
                SuiteResult { name: "a", passed: true, detail: "ok".into(), seconds: 0.0 },
                SuiteResult { name: "b", passed: false, detail: "bad".into(), seconds: 0.0 },
            ],
        };
        assert!(!report.passed());
        assert_eq!(report.failures(), vec!["b"]);
        let text = report.render();
        assert!(text.contains("PASS a"));
        assert!(text.contains("FAIL b"));
        assert!(text.ends_with("1 of 2 suites passed\n"));
    }
}
