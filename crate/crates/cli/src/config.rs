//! Flat run configuration: defaults, then a JSON file, then `--set` flags.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use port_core::data::{PositionMode, SyntheticConfig};
use port_core::encoder::PositionalEncoding;
use port_core::losses::LossWeights;
use port_core::model::ModelConfig;
use port_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::exit::InputError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // synthetic data
    pub num_samples: usize,
    pub raw_len_min: usize,
    pub raw_len_max: usize,
    pub duration_min_s: f64,
    pub duration_max_s: f64,
    pub query_len_min: usize,
    pub query_len_max: usize,
    pub vocab_size: usize,
    pub snr: f64,
    pub moment_ratio_mean: f64,
    pub position_mode: PositionMode,

    // shared by data and model
    pub video_dim: usize,
    pub query_dim: usize,

    // model
    pub len: usize,
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub positional_encoding: PositionalEncoding,
    pub parallel_attention: bool,
    pub dropout: f64,

    // training
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub lambda_qgh: f64,
    pub lambda_rec: f64,
    pub lambda_align: f64,
    pub prt_enabled: bool,
    pub dual_align_enabled: bool,
    pub detach_teacher: bool,
    pub clip_norm: f64,
    pub train_fraction: f64,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let syn = SyntheticConfig::default();
        let train = TrainConfig::default();
        let m = &train.model;
        RunConfig {
            num_samples: syn.num_samples,
            raw_len_min: syn.raw_len_min,
            raw_len_max: syn.raw_len_max,
            duration_min_s: syn.duration_min_s,
            duration_max_s: syn.duration_max_s,
            query_len_min: syn.query_len_min,
            query_len_max: syn.query_len_max,
            vocab_size: syn.vocab_size,
            snr: syn.snr,
            moment_ratio_mean: syn.moment_ratio_mean,
            position_mode: syn.position_mode,
            video_dim: m.video_dim,
            query_dim: m.query_dim,
            len: m.len,
            d: m.d,
            heads: m.heads,
            blocks: m.blocks,
            positional_encoding: m.positional,
            parallel_attention: m.parallel_attention,
            dropout: m.dropout,
            batch_size: train.batch_size,
            epochs: train.epochs,
            lr0: train.lr0,
            weight_decay: train.weight_decay,
            alpha: train.alpha,
            lambda_qgh: train.weights.lambda_qgh,
            lambda_rec: train.weights.lambda_rec,
            lambda_align: train.weights.lambda_align,
            prt_enabled: train.prt_enabled,
            dual_align_enabled: train.dual_align_enabled,
            detach_teacher: train.detach_teacher,
            clip_norm: train.clip_norm,
            train_fraction: 0.8,
            seed: train.seed,
        }
    }
}

impl RunConfig {
    /// Merges `file` and then `overrides` (`key=value`) over the defaults.
    /// Values are read as JSON when they parse, otherwise as strings.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut merged = match serde_json::to_value(RunConfig::default())? {
            Value::Object(m) => m,
            _ => unreachable!("struct serializes to an object"),
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(InputError::wrap)?;
            let parsed: Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))
                .map_err(InputError::wrap)?;
            let Value::Object(obj) = parsed else {
                return Err(InputError::msg(format!(
                    "config {} is not a JSON object",
                    path.display()
                )));
            };
            apply(&mut merged, obj)?;
        }
        let mut flags = Map::new();
        for kv in overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| InputError::msg(format!("override `{kv}` is not key=value")))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            flags.insert(k.trim().to_string(), value);
        }
        if let Some(s) = seed {
            flags.insert("seed".into(), Value::from(s));
        }
        apply(&mut merged, flags)?;
        let cfg: RunConfig = serde_json::from_value(Value::Object(merged))
            .context("invalid config value")
            .map_err(InputError::wrap)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |r: port_core::Result<()>| r.map_err(|e| InputError::wrap(anyhow!(e)));
        check(self.synthetic().validate())?;
        check(self.train().validate())?;
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(InputError::msg(format!(
                "train_fraction must lie in (0, 1], got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            num_samples: self.num_samples,
            raw_len_min: self.raw_len_min,
            raw_len_max: self.raw_len_max,
            duration_min_s: self.duration_min_s,
            duration_max_s: self.duration_max_s,
            video_dim: self.video_dim,
            query_dim: self.query_dim,
            query_len_min: self.query_len_min,
            query_len_max: self.query_len_max,
            vocab_size: self.vocab_size,
            snr: self.snr,
            moment_ratio_mean: self.moment_ratio_mean,
            position_mode: self.position_mode,
            seed: self.seed,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            video_dim: self.video_dim,
            query_dim: self.query_dim,
            d: self.d,
            heads: self.heads,
            blocks: self.blocks,
            len: self.len,
            positional: self.positional_encoding,
            parallel_attention: self.parallel_attention,
            dropout: self.dropout,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            model: self.model(),
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr0: self.lr0,
            weight_decay: self.weight_decay,
            alpha: self.alpha,
            weights: LossWeights {
                lambda_qgh: self.lambda_qgh,
                lambda_rec: self.lambda_rec,
                lambda_align: self.lambda_align,
            },
            prt_enabled: self.prt_enabled,
            dual_align_enabled: self.dual_align_enabled,
            detach_teacher: self.detach_teacher,
            clip_norm: self.clip_norm,
            seed: self.seed,
        }
    }
}

fn apply(into: &mut Map<String, Value>, from: Map<String, Value>) -> Result<()> {
    for (k, v) in from {
        match into.get_mut(&k) {
            Some(slot) => *slot = v,
            None => return Err(InputError::msg(format!("unknown config key `{k}`"))),
        }
    }
    Ok(())
}

/// One `key = default` line per configuration key, for `--help`.
pub fn key_reference() -> String {
    let Value::Object(m) = serde_json::to_value(RunConfig::default()).expect("serializable") else {
        unreachable!("struct serializes to an object")
    };
    let mut out = String::from("Configuration keys and defaults:\n");
    for (k, v) in m {
        out.push_str(&format!("  {k} = {v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.batch_size, c.epochs, c.len, c.d), (16, 100, 128, 256));
        assert_eq!((c.lr0, c.weight_decay, c.alpha), (2e-4, 0.01, 0.2));
        assert_eq!(c.positional_encoding, PositionalEncoding::None);
        assert_eq!(c.lambda_qgh, 5.0);
    }

    #[test]
    fn precedence_is_defaults_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"epochs": 7, "d": 32, "position_mode": "biased"}"#,
        )
        .unwrap();
        let c = RunConfig::resolve(
            Some(&path),
            &["d=64".into(), "positional_encoding=learned".into()],
            Some(5),
        )
        .unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.d, 64);
        assert_eq!(c.position_mode, PositionMode::Biased);
        assert_eq!(c.positional_encoding, PositionalEncoding::Learned);
        assert_eq!(c.seed, 5);
        assert_eq!(c.batch_size, 16);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::resolve(None, &["learning_rate=1".into()], None).unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"bogus": 1}"#).unwrap();
        assert!(RunConfig::resolve(Some(&path), &[], None).is_err());
    }

    #[test]
    fn invalid_values_are_input_errors() {
        let err = RunConfig::resolve(None, &["d=30".into(), "heads=4".into()], None).unwrap_err();
        assert!(err.downcast_ref::<InputError>().is_some());
        assert!(RunConfig::resolve(None, &["epochs=many".into()], None).is_err());
        assert!(RunConfig::resolve(None, &["train_fraction=0".into()], None).is_err());
    }

    #[test]
    fn reference_lists_every_key() {
        let text = key_reference();
        assert!(text.contains("lr0 = 0.0002"));
        assert!(text.contains("prt_enabled = true"));
    }
}
