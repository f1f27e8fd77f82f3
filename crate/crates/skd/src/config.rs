//! `key=value` run configuration shared by model and training settings.
//!
//! Training keys are consumed here; everything else is handed to
//! [`ModelConfig::apply_kv`]. `dropout` sets both.

use std::collections::BTreeMap;

use skd_core::model::{parse_kv_lines, ModelConfig};
use skd_core::train::TrainConfig;

use crate::error::{Result, SkdError};

pub const DEFAULT_PRESET: &str = "student-small";

/// Settings collected from a config file and `--set` overrides, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub preset: Option<String>,
    entries: Vec<(String, String)>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| SkdError::Usage(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (k, v) in parse_kv_lines(text)? {
            out.set(k, v);
        }
        Ok(out)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        if key == "preset" {
            self.preset = Some(value.into());
        } else {
            self.entries.push((key.into(), value.into()));
        }
    }

    /// Parses a `--set key=value` argument.
    pub fn set_arg(&mut self, arg: &str) -> Result<()> {
        let (k, v) = arg
            .split_once('=')
            .ok_or_else(|| SkdError::Usage(format!("expected key=value, got {arg:?}")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    /// Applies the training keys to `train` and returns the model config.
    /// `input_dim` comes from the data unless the config names it, in which
    /// case the two must agree.
    pub fn resolve(&self, input_dim: usize, train: &mut TrainConfig) -> Result<ModelConfig> {
        let preset = self.preset.as_deref().unwrap_or(DEFAULT_PRESET);
        let mut model = ModelConfig::preset(preset, input_dim)
            .ok_or_else(|| SkdError::Usage(format!("unknown preset {preset:?}")))?;
        let mut model_kv = Vec::new();
        for (k, v) in &self.entries {
            match k.as_str() {
                "learning_rate" | "lr" => train.learning_rate = parse(k, v)?,
                "decay_per_epoch" => train.decay_per_epoch = parse(k, v)?,
                "batch_size" => train.batch_size = parse(k, v)?,
                "teacher_forcing_rate" => train.teacher_forcing_rate = parse(k, v)?,
                "max_epochs" => train.max_epochs = parse(k, v)?,
                "patience" => train.patience = parse(k, v)?,
                "seed" => train.seed = parse(k, v)?,
                "clip_norm" => train.clip_norm = parse(k, v)?,
                "val_max_len" => train.val_max_len = Some(parse(k, v)?),
                "dropout" => {
                    train.dropout = parse(k, v)?;
                    model_kv.push((k.as_str(), v.as_str()));
                }
                _ => model_kv.push((k.as_str(), v.as_str())),
            }
        }
        model.apply_kv(model_kv)?;
        if model.input_dim != input_dim {
            return Err(SkdError::Usage(format!(
                "config sets input_dim={} but the data has dimension {input_dim}",
                model.input_dim
            )));
        }
        model.validate()?;
        Ok(model)
    }
}

/// Flat view of both configs for run manifests.
pub fn describe(model: &ModelConfig, train: &TrainConfig) -> BTreeMap<String, String> {
    let mut out = model.to_kv();
    let t = train;
    for (k, v) in [
        ("learning_rate", t.learning_rate.to_string()),
        ("decay_per_epoch", t.decay_per_epoch.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("teacher_forcing_rate", t.teacher_forcing_rate.to_string()),
        ("dropout", t.dropout.to_string()),
        ("max_epochs", t.max_epochs.to_string()),
        ("patience", t.patience.to_string()),
        ("seed", t.seed.to_string()),
        ("clip_norm", t.clip_norm.to_string()),
    ] {
        out.insert(k.into(), v);
    }
    if let Some(l) = t.val_max_len {
        out.insert("val_max_len".into(), l.to_string());
    }
    out
}
