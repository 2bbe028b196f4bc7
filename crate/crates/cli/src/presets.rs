//! Built-in per-dataset configurations. Real datasets need
//! `dataset.path` set to a local CSV.

use serde_json::Value;

use crate::error::{Error, Result};

const PRESETS: &[(&str, &str)] = &[
    ("sines", include_str!("../presets/sines.json")),
    ("stocks", include_str!("../presets/stocks.json")),
    ("etth", include_str!("../presets/etth.json")),
    ("mujoco", include_str!("../presets/mujoco.json")),
    ("energy", include_str!("../presets/energy.json")),
    ("fmri", include_str!("../presets/fmri.json")),
    ("sdformer-sines", include_str!("../presets/sdformer-sines.json")),
    ("sdformer-stocks", include_str!("../presets/sdformer-stocks.json")),
    ("sdformer-etth", include_str!("../presets/sdformer-etth.json")),
    ("sdformer-mujoco", include_str!("../presets/sdformer-mujoco.json")),
    ("sdformer-energy", include_str!("../presets/sdformer-energy.json")),
    ("sdformer-fmri", include_str!("../presets/sdformer-fmri.json")),
];

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

pub fn preset(name: &str) -> Result<Value> {
    let (_, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::UnknownPreset(name.into(), names().join(", ")))?;
    Ok(serde_json::from_str(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{resolve, Overrides};

    fn load(name: &str) -> crate::config::RunConfig {
        resolve(&Overrides {
            preset: Some(name.into()),
            set: vec!["dataset.path=\"data.csv\"".into()],
            ..Overrides::default()
        })
        .unwrap()
    }

    #[test]
    fn every_preset_resolves() {
        for name in names() {
            let cfg = load(name);
            assert_eq!(cfg.dataset.window, 24, "{name}");
            assert_eq!(cfg.encoder_depths.as_deref(), Some(cfg.tokenizer.depths().as_slice()), "{name}");
        }
        assert!(matches!(preset("nope"), Err(Error::UnknownPreset(..))));
    }

    #[test]
    fn multi_scale_rows() {
        let rows: [(&str, &[usize], f64, &[usize], f64); 6] = [
            ("sines", &[512, 512], 1.0, &[2, 4], 0.1),
            ("stocks", &[256, 512], 0.5, &[2, 4], 0.3),
            ("etth", &[128, 512], 0.5, &[4, 8], 0.1),
            ("mujoco", &[512, 512], 1.0, &[2, 4], 0.1),
            ("energy", &[512, 512], 0.0005, &[2, 4], 0.1),
            ("fmri", &[128, 512, 512], 0.01, &[2, 4, 8], 0.1),
        ];
        for (name, v, lambda, r, eps) in rows {
            let cfg = load(name);
            assert_eq!(cfg.tokenizer.vocab, v, "{name}");
            assert_eq!(cfg.tokenizer.lambda, lambda, "{name}");
            assert_eq!(cfg.tokenizer.factors, r, "{name}");
            assert_eq!(cfg.tokenizer.code_dim, 512, "{name}");
            assert_eq!(cfg.transformer.layers, 2, "{name}");
            assert_eq!(cfg.transformer_train.augment, eps, "{name}");
        }
    }

    #[test]
    fn single_scale_rows() {
        let rows = [
            ("sines", 1024, 512, 0.5, 4, 2, 0.3),
            ("stocks", 512, 256, 2.0, 4, 2, 0.3),
            ("etth", 512, 512, 0.5, 4, 6, 0.3),
            ("mujoco", 512, 512, 0.5, 4, 2, 0.1),
            ("energy", 512, 512, 0.001, 4, 2, 0.1),
            ("fmri", 512, 512, 0.01, 2, 2, 0.1),
        ];
        for (name, v, dc, lambda, r, layers, eps) in rows {
            let cfg = load(&format!("sdformer-{name}"));
            assert_eq!(cfg.tokenizer.vocab, vec![v], "{name}");
            assert_eq!(cfg.tokenizer.code_dim, dc, "{name}");
            assert_eq!(cfg.tokenizer.lambda, lambda, "{name}");
            assert_eq!(cfg.tokenizer.factors, vec![r], "{name}");
            assert_eq!(cfg.transformer.layers, layers, "{name}");
            assert_eq!(cfg.transformer_train.augment, eps, "{name}");
        }
    }
}
