//! Command implementations. Every command reads and writes artifacts under
//! the run directory `cfg.out` and finishes by writing a manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use msdformer::autodiff::Tensor;
use msdformer::data::{self, DatasetManifest, Normalizer, TimeSeriesDataset};
use msdformer::eval::{self, MetricReport, AUTOCORR_LAGS};
use msdformer::generate::{generate, write_tokens_jsonl};
use msdformer::nn::Checkpoint;
use msdformer::seqmodel::{evaluate_windows, train_transformer, ARTransformer};
use msdformer::theory;
use msdformer::tokenizer::{train_tokenizer, MultiScaleTokenizer};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    TrainTokenizer,
    TrainTransformer,
    Generate,
    Evaluate,
    RdAnalysis,
    SelfTest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::TrainTokenizer => "train-tokenizer",
            Command::TrainTransformer => "train-transformer",
            Command::Generate => "generate",
            Command::Evaluate => "evaluate",
            Command::RdAnalysis => "rd-analysis",
            Command::SelfTest => "selftest",
        }
    }
}

/// File names inside a run directory.
pub mod files {
    pub const DATASET: &str = "dataset.json";
    pub const TOKENIZER: &str = "tokenizer.ckpt.json";
    pub const TRANSFORMER: &str = "transformer.ckpt.json";
    pub const TOKENIZER_LOSS: &str = "tokenizer_loss.csv";
    pub const TRANSFORMER_LOSS: &str = "transformer_loss.csv";
    pub const TOKENIZER_SUMMARY: &str = "tokenizer_summary.json";
    pub const TRANSFORMER_SUMMARY: &str = "transformer_summary.json";
    pub const TOKENS: &str = "tokens.jsonl";
    pub const SAMPLES: &str = "samples.csv";
    pub const METRICS_JSON: &str = "metrics.json";
    pub const METRICS_CSV: &str = "metrics.csv";
    pub const FEATURES_REAL: &str = "features_real.csv";
    pub const FEATURES_SYNTHETIC: &str = "features_synthetic.csv";
    pub const RD_SWEEP: &str = "rd_sweep.csv";
    pub const RD_SUMMARY: &str = "rd_summary.json";
    pub const SELFTEST: &str = "selftest.json";

    pub fn manifest(command: &str) -> String {
        format!("manifest-{command}.json")
    }
}

/// What a command produced.
#[derive(Clone, Debug, Serialize)]
pub struct Outcome {
    pub command: &'static str,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub summary: Value,
}

/// Normalized train/test windows plus the fitted normalizer.
pub struct PreparedData {
    pub features: Vec<String>,
    pub normalizer: Normalizer,
    /// Normalized training windows `(n, τ, d)`.
    pub train: Tensor,
    /// Normalized held-out windows.
    pub test: Tensor,
}

fn load_raw(cfg: &RunConfig) -> Result<TimeSeriesDataset> {
    let d = &cfg.dataset;
    Ok(match d.source {
        DataSource::Sines => data::gen_sines(d.windows, d.window, d.channels, d.seed)?,
        DataSource::Csv => {
            let path = d.path.as_ref().ok_or_else(|| Error::config("dataset.path", "required for csv"))?;
            data::load_csv(path, d.window, d.stride)?
        }
    })
}

/// Loads the configured data, splits it by index and normalizes both parts
/// with constants fitted on the training part. Returns the configuration
/// with the tokenizer shape taken from the data.
pub fn prepare_data(cfg: &RunConfig) -> Result<(RunConfig, PreparedData)> {
    let raw = load_raw(cfg)?;
    let mut cfg = cfg.clone();
    cfg.sync_data_shape(raw.channels());
    cfg.validate()?;
    let (train, test) = raw.split(cfg.dataset.train_frac)?;
    if train.is_empty() || test.is_empty() {
        return Err(msdformer::Error::InsufficientData(format!(
            "{} windows cannot be split into non-empty train and test parts at {}",
            raw.len(),
            cfg.dataset.train_frac
        ))
        .into());
    }
    let normalizer = Normalizer::fit(&train.windows)?;
    let prepared = PreparedData {
        features: raw.features.clone(),
        train: normalizer.normalize(&train.windows)?,
        test: normalizer.normalize(&test.windows)?,
        normalizer,
    };
    Ok((cfg, prepared))
}

struct Run {
    root: PathBuf,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<String> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(name.to_string())
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<String> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    fn require(&self, name: &str, what: &'static str, command: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingDependency { what, path: p, command })
        }
    }

    /// Reloads the data and checks it against the manifest written when the
    /// tokenizer was trained.
    fn data(&self, cfg: &RunConfig) -> Result<(RunConfig, PreparedData)> {
        let path = self.require(files::DATASET, "dataset manifest", "train-tokenizer")?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        let (cfg, data) = prepare_data(cfg)?;
        if manifest.normalizer != data.normalizer
            || manifest.window != cfg.dataset.window
            || manifest.channels != data.train.dim(2)
        {
            return Err(Error::config(
                "dataset",
                format!(
                    "data differs from the data recorded in {}; rerun train-tokenizer or restore the original dataset settings",
                    path.display()
                ),
            ));
        }
        Ok((cfg, data))
    }

    fn tokenizer(&self) -> Result<MultiScaleTokenizer> {
        let p = self.require(files::TOKENIZER, "tokenizer checkpoint", "train-tokenizer")?;
        Ok(MultiScaleTokenizer::from_checkpoint(&Checkpoint::load(&p)?)?)
    }

    fn transformer(&self) -> Result<ARTransformer> {
        let p = self.require(files::TRANSFORMER, "transformer checkpoint", "train-transformer")?;
        Ok(ARTransformer::from_checkpoint(&Checkpoint::load(&p)?)?)
    }
}

/// Runs `command` and writes its manifest.
pub fn run(command: Command, cfg: &RunConfig) -> Result<Outcome> {
    let run = Run { root: cfg.out.clone() };
    fs::create_dir_all(&run.root).map_err(|e| Error::io(&run.root, e))?;
    log::info!("{} → {}", command.name(), run.root.display());
    let (artifacts, summary) = match command {
        Command::TrainTokenizer => cmd_train_tokenizer(&run, cfg)?,
        Command::TrainTransformer => cmd_train_transformer(&run, cfg)?,
        Command::Generate => cmd_generate(&run, cfg)?,
        Command::Evaluate => cmd_evaluate(&run, cfg)?,
        Command::RdAnalysis => cmd_rd_analysis(&run)?,
        Command::SelfTest => {
            let report = crate::selftest::run_all(cfg.seed.unwrap_or(0));
            print!("{}", report.render());
            let name = run.write_json(files::SELFTEST, &report)?;
            if !report.passed() {
                return Err(Error::SelfTest(report.failures().join(", ")));
            }
            (vec![name], json!({ "suites": report.suites.len(), "passed": true }))
        }
    };
    let manifest = files::manifest(command.name());
    let mut artifacts = artifacts;
    artifacts.push(manifest.clone());
    let outcome = Outcome {
        command: command.name(),
        artifacts,
        summary,
    };
    run.write_json(
        &manifest,
        &json!({
            "command": command.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.seed,
            "config": cfg,
            "artifacts": outcome.artifacts,
            "summary": outcome.summary,
        }),
    )?;
    Ok(outcome)
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel().max(1) as f64
}

fn reconstruction_mse(tokenizer: &MultiScaleTokenizer, x: &Tensor) -> Result<f64> {
    let (_, rec) = tokenizer.tokenize_batch(x)?;
    Ok(mse(&rec, x))
}

fn cmd_train_tokenizer(run: &Run, cfg: &RunConfig) -> Result<(Vec<String>, Value)> {
    let (cfg, data) = prepare_data(cfg)?;
    let manifest = DatasetManifest {
        window: cfg.dataset.window,
        channels: data.train.dim(2),
        windows: data.train.dim(0) + data.test.dim(0),
        features: data.features.clone(),
        normalizer: data.normalizer.clone(),
    };
    let mut out = vec![run.write_json(files::DATASET, &manifest)?];

    let (tokenizer, history) = train_tokenizer(&data.train, cfg.tokenizer.clone(), &cfg.tokenizer_train)?;
    tokenizer.to_checkpoint()?.save(&run.path(files::TOKENIZER))?;
    out.push(files::TOKENIZER.into());

    let mut csv = String::from("step,loss,reconstruction,embedding,resets\n");
    for i in 0..history.loss.len() {
        writeln!(
            csv,
            "{},{},{},{},{}",
            i,
            history.loss[i],
            history.reconstruction[i],
            history.embedding[i],
            history.resets[i]
        )
        .expect("write to string");
    }
    out.push(run.write(files::TOKENIZER_LOSS, csv)?);

    let summary = json!({
        "steps": history.loss.len(),
        "final_loss": history.loss.last(),
        "train_mse": reconstruction_mse(&tokenizer, &data.train)?,
        "test_mse": reconstruction_mse(&tokenizer, &data.test)?,
        "codebook_usage": eval::codebook_usage_pct(&tokenizer, &data.train)?,
        "train_windows": data.train.dim(0),
        "test_windows": data.test.dim(0),
    });
    out.push(run.write_json(files::TOKENIZER_SUMMARY, &summary)?);
    Ok((out, summary))
}

fn cmd_train_transformer(run: &Run, cfg: &RunConfig) -> Result<(Vec<String>, Value)> {
    let tokenizer = run.tokenizer()?;
    let (cfg, data) = run.data(cfg)?;
    let (model, history) = train_transformer(&data.train, &tokenizer, cfg.transformer, &cfg.transformer_train)?;
    model.to_checkpoint()?.save(&run.path(files::TRANSFORMER))?;
    let mut out = vec![files::TRANSFORMER.to_string()];

    let mut csv = String::from("step,loss\n");
    for (i, l) in history.loss.iter().enumerate() {
        writeln!(csv, "{i},{l}").expect("write to string");
    }
    out.push(run.write(files::TRANSFORMER_LOSS, csv)?);

    let summary = json!({
        "steps": history.loss.len(),
        "final_loss": history.loss.last(),
        "test_loss": evaluate_windows(&model, &tokenizer, &data.test)?,
        "sequence_length": model.max_len(),
        "vocabulary": model.vocab().total(),
    });
    out.push(run.write_json(files::TRANSFORMER_SUMMARY, &summary)?);
    Ok((out, summary))
}

fn cmd_generate(run: &Run, cfg: &RunConfig) -> Result<(Vec<String>, Value)> {
    let tokenizer = run.tokenizer()?;
    let model = run.transformer()?;
    let (cfg, data) = run.data(cfg)?;
    let n = cfg.generate.samples.unwrap_or(data.test.dim(0));
    let generation = generate(&model, &tokenizer, Some(&data.normalizer), n, &cfg.sampler)?;
    write_tokens_jsonl(&run.path(files::TOKENS), &generation.tokens)?;
    data::write_windows_csv(&run.path(files::SAMPLES), &generation.samples, &data.features)?;
    let summary = json!({ "samples": n, "clamped": generation.clamped });
    Ok((vec![files::TOKENS.into(), files::SAMPLES.into()], summary))
}

fn feature_header(channels: &[String]) -> String {
    let mut cols = Vec::new();
    for c in channels {
        cols.push(format!("{c}_mean"));
        cols.push(format!("{c}_std"));
        for lag in 1..=AUTOCORR_LAGS {
            cols.push(format!("{c}_ac{lag}"));
        }
    }
    cols.join(",")
}

fn features_csv(x: &Tensor, channels: &[String]) -> Result<String> {
    let f = eval::window_features(x)?;
    let mut s = feature_header(channels);
    s.push('\n');
    for row in f.row_iter() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    Ok(s)
}

/// Every metric for one synthetic set, names prefixed with `prefix`.
fn score_set(cfg: &RunConfig, real: &Tensor, synth: &Tensor, prefix: &str) -> Result<Vec<MetricReport>> {
    let named = |m: MetricReport| MetricReport {
        name: format!("{prefix}{}", m.name),
        ..m
    };
    let mut out = vec![named(eval::discriminative_score(real, synth, &cfg.eval.discriminative)?)];
    if cfg.eval.run_predictive {
        out.push(named(eval::predictive_score(real, synth, &cfg.eval.predictive)?));
    }
    out.push(MetricReport::single(
        &format!("{prefix}feature_frechet"),
        eval::feature_frechet_score(real, synth)?,
        json!({ "real": real.dim(0), "synthetic": synth.dim(0) }),
    ));
    out.push(MetricReport::single(
        &format!("{prefix}marginal_hist"),
        eval::marginal_hist_distance(real, synth, cfg.eval.bins)?,
        json!({ "bins": cfg.eval.bins }),
    ));
    Ok(out)
}

fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("metric,mean,std,repeats,values\n");
    for r in reports {
        let values: Vec<String> = r.values.iter().map(f64::to_string).collect();
        writeln!(s, "{},{},{},{},{}", r.name, r.mean, r.std, r.values.len(), values.join(";")).expect("write to string");
    }
    s
}

fn cmd_evaluate(run: &Run, cfg: &RunConfig) -> Result<(Vec<String>, Value)> {
    let samples = run.require(files::SAMPLES, "generated samples", "generate")?;
    let tokenizer = run.tokenizer()?;
    let (cfg, data) = run.data(&cfg.clone())?;
    let synthetic = data::read_windows_csv(&samples)?;
    let synth = data.normalizer.normalize(&synthetic.windows)?;
    let real = &data.test;

    let mut reports = score_set(&cfg, real, &synth, "")?;
    if cfg.eval.noise_baseline {
        let noise = eval::uniform_noise_like(real, cfg.eval.discriminative.seed)?;
        reports.extend(score_set(&cfg, real, &noise, "noise/")?);
    }
    for (k, u) in eval::codebook_usage_pct(&tokenizer, real)?.into_iter().enumerate() {
        reports.push(MetricReport::single(
            &format!("codebook_usage/scale{}", k + 1),
            u,
            json!({ "windows": real.dim(0), "vocab": tokenizer.vocab_sizes()[k] }),
        ));
    }

    let out = vec![
        run.write_json(files::METRICS_JSON, &json!({ "metrics": reports }))?,
        run.write(files::METRICS_CSV, metrics_csv(&reports))?,
        run.write(files::FEATURES_REAL, features_csv(real, &data.features)?)?,
        run.write(files::FEATURES_SYNTHETIC, features_csv(&synth, &data.features)?)?,
    ];
    let summary: serde_json::Map<String, Value> =
        reports.iter().map(|r| (r.name.clone(), json!(r.mean))).collect();
    Ok((out, Value::Object(summary)))
}

fn cmd_rd_analysis(run: &Run) -> Result<(Vec<String>, Value)> {
    let sweep = theory::default_sweep();
    let report = theory::compare_rates(&sweep);
    report.write_csv(&run.path(files::RD_SWEEP))?;
    let example = theory::RateConfig {
        l: 6,
        v: 512,
        l_extra: 3,
        v_extra: 128,
    };
    let summary = json!({
        "configurations": sweep.len(),
        "admissible": report.rows.len(),
        "excluded": report.excluded.len(),
        "violations": report.violations(),
        "multi_scale_always_wins": report.all_multi_scale_win(),
        "example": {
            "config": example,
            "r_s": theory::rate_single_expand(example.l, example.v, example.v_extra),
            "r_m": theory::rate_multi(example.l, example.v, example.l_extra, example.v_extra),
        },
    });
    if report.violations() > 0 {
        log::warn!("{} admissible configurations favour the single-scale expansion", report.violations());
    }
    let out = vec![files::RD_SWEEP.to_string(), run.write_json(files::RD_SUMMARY, &summary)?];
    Ok((out, summary))
}

/// Reads a JSON artifact from a run directory.
pub fn read_artifact(dir: &Path, name: &str) -> Result<Value> {
    let p = dir.join(name);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}
