//! Prediction files and small argument helpers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use tabpo_core::config::ConfigError;
use tabpo_core::schema::{Codebook, Example, LabelSet};

use crate::errors::InputError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub prediction: String,
}

pub fn predictions_jsonl(records: &[PredictionRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(require(path)?).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(line).map_err(|e| InputError::Format {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Pairs each gold example with its prediction by id.
pub fn join_predictions(gold: &[Example], preds: &[PredictionRecord]) -> Result<Vec<(LabelSet, String)>> {
    let mut by_id: BTreeMap<&str, &str> = BTreeMap::new();
    for p in preds {
        if by_id.insert(&p.id, &p.prediction).is_some() {
            return Err(InputError::Mismatch(format!("duplicate prediction id `{}`", p.id)).into());
        }
    }
    if by_id.len() != gold.len() {
        return Err(InputError::Mismatch(format!("{} predictions for {} gold examples", by_id.len(), gold.len())).into());
    }
    gold.iter()
        .map(|e| {
            by_id
                .get(e.id.as_str())
                .map(|p| (e.gold.clone(), p.to_string()))
                .ok_or_else(|| InputError::Mismatch(format!("no prediction for id `{}`", e.id)).into())
        })
        .collect()
}

/// Fails with a configuration error when a required input is missing.
pub fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(ConfigError::MissingFile(path.to_path_buf()).into())
    }
}

pub fn read_codebook(path: &Path) -> Result<Codebook> {
    let text = fs::read_to_string(require(path)?).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?)
}

/// `codebook.json` next to `sibling` unless given explicitly.
pub fn codebook_path(explicit: Option<&PathBuf>, sibling: &Path) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| parent_dir(sibling).join("codebook.json"))
}

pub fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn parse_list<T: std::str::FromStr>(raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| InputError::BadList(raw.to_string()).into()))
        .collect()
}

pub fn parse_array3(raw: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = parse_list(raw)?;
    v.try_into().map_err(|_| InputError::BadList(raw.to_string()).into())
}

/// File-system friendly arm name.
pub fn slug(name: &str) -> String {
    name.chars()
        .map(|c| match c {
            '+' => '_',
            '@' => '-',
            c if c.is_ascii_alphanumeric() || c == '_' || c == '-' => c,
            _ => '_',
        })
        .collect()
}
