//! Run configuration: JSON layering, `--set` overrides and validation.
//!
//! Resolution order, later layers winning: built-in defaults, preset,
//! `--config` file, `--set` overrides, `--seed`, `--out`.

use std::path::{Path, PathBuf};

use msdformer::eval::PostHocConfig;
use msdformer::generate::SamplerConfig;
use msdformer::seqmodel::{TransformerConfig, TransformerTrainConfig};
use msdformer::tokenizer::{TokenizerConfig, TokenizerTrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Sines,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// CSV file with a header row; required for `csv`.
    pub path: Option<PathBuf>,
    /// Number of generated windows for `sines`.
    pub windows: usize,
    /// Window length `τ`.
    pub window: usize,
    /// Feature count for `sines`; read from the file for `csv`.
    pub channels: usize,
    pub stride: usize,
    /// Leading fraction of windows used for training.
    pub train_frac: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Sines,
            path: None,
            windows: 2000,
            window: 24,
            channels: 5,
            stride: 1,
            train_frac: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Number of series to generate; defaults to the held-out window count.
    pub samples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bins: usize,
    pub discriminative: PostHocConfig,
    pub predictive: PostHocConfig,
    pub run_predictive: bool,
    /// Also score uniform white noise against the real windows.
    pub noise_baseline: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: msdformer::eval::DEFAULT_BINS,
            discriminative: PostHocConfig::default(),
            predictive: PostHocConfig::predictive(),
            run_predictive: true,
            noise_baseline: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// `window` and `channels` are taken from the data.
    pub tokenizer: TokenizerConfig,
    /// Optional explicit encoder depths; must equal `log2 r^(k)`.
    pub encoder_depths: Option<Vec<usize>>,
    pub tokenizer_train: TokenizerTrainConfig,
    pub transformer: TransformerConfig,
    pub transformer_train: TransformerTrainConfig,
    pub sampler: SamplerConfig,
    pub generate: GenerateConfig,
    pub eval: EvalConfig,
    /// When set, overrides every component seed.
    pub seed: Option<u64>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            tokenizer: TokenizerConfig::default(),
            encoder_depths: None,
            tokenizer_train: TokenizerTrainConfig::default(),
            transformer: TransformerConfig::default(),
            transformer_train: TransformerTrainConfig::default(),
            sampler: SamplerConfig::default(),
            generate: GenerateConfig::default(),
            eval: EvalConfig::default(),
            seed: None,
            out: PathBuf::from("runs/default"),
        }
    }
}

/// Everything that feeds into [`resolve`].
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Recursively merges `patch` into `base`; objects merge, everything else
/// replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as JSON and
/// falls back to a plain string.
pub fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must have the form key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::config(key, "empty path segment in override key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(Error::config(parts[..i].join("."), "cannot set a field inside a non-object value"));
        }
        let obj = node.as_object_mut().expect("checked object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
    }
    unreachable!("loop returns on the last segment")
}

/// Deserializes with the offending field path in the error.
pub fn from_value(value: Value) -> Result<RunConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        Error::config(field, e.into_inner().to_string())
    })
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}

/// Layers all configuration sources and validates the result.
pub fn resolve(o: &Overrides) -> Result<RunConfig> {
    let mut value = serde_json::to_value(RunConfig::default())?;
    if let Some(name) = &o.preset {
        merge(&mut value, crate::presets::preset(name)?);
    }
    if let Some(path) = &o.config {
        merge(&mut value, read_json(path)?);
    }
    for s in &o.set {
        apply_set(&mut value, s)?;
    }
    let mut cfg = from_value(value)?;
    if o.seed.is_some() {
        cfg.seed = o.seed;
    }
    if let Some(out) = &o.out {
        cfg.out = out.clone();
    }
    cfg.apply_seed();
    cfg.sync_data_shape(cfg.dataset.channels);
    cfg.validate()?;
    Ok(cfg)
}

fn core_field(field: &str, r: msdformer::Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        msdformer::Error::Config(m) => Error::config(field, m),
        other => Error::Core(other),
    })
}

impl RunConfig {
    /// Propagates the global seed into every component.
    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.dataset.seed = s;
            self.tokenizer_train.seed = s;
            self.transformer_train.seed = s;
            self.sampler.seed = s;
            self.eval.discriminative.seed = s;
            self.eval.predictive.seed = s;
        }
    }

    /// Copies the data's window length and feature count into the tokenizer.
    pub fn sync_data_shape(&mut self, channels: usize) {
        self.tokenizer.window = self.dataset.window;
        self.tokenizer.channels = channels;
    }

    /// Checks every invariant before any compute runs.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.window == 0 {
            return Err(Error::config("dataset.window", "must be positive"));
        }
        if d.stride == 0 {
            return Err(Error::config("dataset.stride", "must be positive"));
        }
        if !(d.train_frac > 0.0 && d.train_frac < 1.0) {
            return Err(Error::config("dataset.train_frac", format!("{} is outside (0, 1)", d.train_frac)));
        }
        match d.source {
            DataSource::Sines => {
                if d.windows < 2 {
                    return Err(Error::config("dataset.windows", "need at least 2 windows to split"));
                }
                if d.channels == 0 {
                    return Err(Error::config("dataset.channels", "must be positive"));
                }
            }
            DataSource::Csv => {
                if d.path.is_none() {
                    return Err(Error::config("dataset.path", "required when dataset.source is csv"));
                }
            }
        }

        let t = &self.tokenizer;
        if t.channels == 0 {
            return Err(Error::config("tokenizer.channels", "must be positive"));
        }
        core_field("tokenizer", t.validate())?;
        if let Some(depths) = &self.encoder_depths {
            if depths.len() != t.factors.len() {
                return Err(Error::config(
                    "encoder_depths",
                    format!("has {} entries but tokenizer.factors has {}", depths.len(), t.factors.len()),
                ));
            }
            let derived = t.depths();
            if let Some(k) = (0..depths.len()).find(|&k| depths[k] != derived[k]) {
                return Err(Error::config(
                    format!("encoder_depths[{k}]"),
                    format!("{} does not match log2 of factor {} (= {})", depths[k], t.factors[k], derived[k]),
                ));
            }
        }
        core_field("tokenizer_train", self.tokenizer_train.validate())?;
        core_field("transformer", self.transformer.validate())?;
        core_field("transformer_train", self.transformer_train.validate())?;
        let total: usize = t.vocab.iter().sum();
        core_field("sampler", self.sampler.validate(total))?;
        if self.generate.samples == Some(0) {
            return Err(Error::config("generate.samples", "must be positive"));
        }
        if self.eval.bins < 2 {
            return Err(Error::config("eval.bins", "need at least 2 bins"));
        }
        core_field("eval.discriminative", self.eval.discriminative.validate())?;
        core_field("eval.predictive", self.eval.predictive.validate())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve_with(set: &[&str]) -> Result<RunConfig> {
        resolve(&Overrides {
            set: set.iter().map(|s| s.to_string()).collect(),
            ..Overrides::default()
        })
    }

    #[test]
    fn defaults_are_valid() {
        let cfg = resolve_with(&[]).unwrap();
        assert_eq!(cfg, {
            let mut d = RunConfig::default();
            d.sync_data_shape(5);
            d
        });
    }

    #[test]
    fn set_parses_json_and_strings() {
        let cfg = resolve_with(&["tokenizer.vocab=[64,32]", "out=runs/x", "transformer.layers=3"]).unwrap();
        assert_eq!(cfg.tokenizer.vocab, vec![64, 32]);
        assert_eq!(cfg.out, PathBuf::from("runs/x"));
        assert_eq!(cfg.transformer.layers, 3);
    }

    #[test]
    fn set_creates_nested_objects() {
        let mut v = serde_json::json!({ "a": null });
        apply_set(&mut v, "a.b.c=1").unwrap();
        assert_eq!(v, serde_json::json!({ "a": { "b": { "c": 1 } } }));
        assert!(apply_set(&mut v, "a.b.c.d=1").is_err());
        assert!(apply_set(&mut v, "novalue").is_err());
        assert!(apply_set(&mut v, "a..b=1").is_err());
    }

    #[test]
    fn type_errors_name_the_field() {
        let err = resolve_with(&["tokenizer.lambda=\"high\""]).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "tokenizer.lambda"), "{err}");
        let err = resolve_with(&["tokenizer.bogus=1"]).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field.starts_with("tokenizer")), "{err}");
    }

    #[test]
    fn invariant_violations_are_rejected() {
        for (set, field) in [
            ("dataset.window=25", "tokenizer"),
            ("tokenizer.vocab=[16]", "tokenizer"),
            ("tokenizer.factors=[3,4]", "tokenizer"),
            ("dataset.train_frac=1.0", "dataset.train_frac"),
            ("dataset.source=\"csv\"", "dataset.path"),
            ("encoder_depths=[1]", "encoder_depths"),
            ("encoder_depths=[1,3]", "encoder_depths[1]"),
            ("transformer.heads=5", "transformer"),
            ("sampler.temperature=0", "sampler"),
            ("eval.bins=1", "eval.bins"),
            ("eval.discriminative.train_frac=0", "eval.discriminative"),
            ("generate.samples=0", "generate.samples"),
        ] {
            match resolve_with(&[set]) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field, "{set}"),
                other => panic!("{set}: {other:?}"),
            }
        }
        assert!(resolve_with(&["encoder_depths=[1,2]"]).is_ok());
    }

    #[test]
    fn seed_overrides_components() {
        let cfg = resolve(&Overrides {
            seed: Some(7),
            out: Some("o".into()),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(
            [
                cfg.dataset.seed,
                cfg.tokenizer_train.seed,
                cfg.transformer_train.seed,
                cfg.sampler.seed,
                cfg.eval.discriminative.seed,
                cfg.eval.predictive.seed
            ],
            [7; 6]
        );
        assert_eq!(cfg.out, PathBuf::from("o"));
    }

    #[test]
    fn config_file_layers_under_set() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), r#"{"tokenizer": {"lambda": 0.25, "vocab": [8, 8]}, "seed": 3}"#).unwrap();
        let cfg = resolve(&Overrides {
            config: Some(f.path().to_path_buf()),
            set: vec!["tokenizer.lambda=2".into()],
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(cfg.tokenizer.lambda, 2.0);
        assert_eq!(cfg.tokenizer.vocab, vec![8, 8]);
        assert_eq!(cfg.tokenizer_train.seed, 3);
        // untouched siblings keep their defaults
        assert_eq!(cfg.tokenizer.factors, vec![2, 4]);
    }

    #[test]
    fn merge_replaces_arrays() {
        let mut a = serde_json::json!({ "x": [1, 2, 3], "y": { "z": 1 } });
        merge(&mut a, serde_json::json!({ "x": [4], "y": { "w": 2 } }));
        assert_eq!(a, serde_json::json!({ "x": [4], "y": { "z": 1, "w": 2 } }));
    }
}
