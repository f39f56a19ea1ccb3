//! Run configuration: one TOML document with sections `model`, `objective`,
//! `weights`, `train` and `data`, plus dotted `key=value` overrides.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confusion::PrefConfig;
use crate::eval::EvalOptions;
use crate::objectives::{ObjectiveConfig, WeightConfig};
use crate::policy::ModelConfig;
use crate::synth::TaskSpec;
use crate::trainer::{TrainConfig, TrainSettings};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected dotted.key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("required input not found: {0}")]
    MissingFile(std::path::PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSettings {
    pub task: TaskSpec,
    pub ratios: [f64; 3],
    pub split_seed: u64,
    pub prefs: PrefConfig,
    pub eval: EvalOptions,
    /// Top-k rows per level in confusion tables.
    pub confusion_top_k: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            task: TaskSpec::default(),
            ratios: [0.8, 0.1, 0.1],
            split_seed: 0,
            prefs: PrefConfig::default(),
            eval: EvalOptions::default(),
            confusion_top_k: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub weights: WeightConfig,
    pub train: TrainSettings,
    pub data: DataSettings,
}

impl RunConfig {
    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            objective: self.objective.clone(),
            weights: self.weights.clone(),
            train: self.train.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text` and applies `key=value` overrides before validation.
    /// Values are read as TOML literals, falling back to plain strings.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.training().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.data.prefs.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let r = self.data.ratios;
        if r.iter().any(|x| !x.is_finite() || *x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(ConfigError::Invalid("data.ratios must be >= 0 and sum to 1".into()));
        }
        if !(self.data.eval.jaccard_threshold > 0.0 && self.data.eval.jaccard_threshold <= 1.0) {
            return Err(ConfigError::Invalid("data.eval.jaccard_threshold must lie in (0, 1]".into()));
        }
        if self.data.confusion_top_k == 0 {
            return Err(ConfigError::Invalid("data.confusion_top_k must be >= 1".into()));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("probe key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::BadOverride(spec.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::BadOverride(spec.to_string()));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(format!("{spec} (`{p}` is not a section)")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}
