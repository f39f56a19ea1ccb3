//! Span matching, empirical confusion distributions and preference-pair
//! construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parallel::{map_slice, ExecMode};
use crate::schema::{AnnotationTuple, Codebook, Example, LabelSet};

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.6;

#[derive(Debug, Error)]
pub enum PrefError {
    #[error("no valid {family} perturbation: {reason}")]
    PerturbationUnavailable { family: Family, reason: String },
    #[error("invalid preference config: {0}")]
    InvalidConfig(String),
    #[error("preference file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercased whitespace tokens.
pub fn span_tokens(span: &str) -> BTreeSet<String> {
    span.split_whitespace().map(str::to_lowercase).collect()
}

pub fn jaccard_sets(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

pub fn jaccard_similarity(a: &str, b: &str) -> f64 {
    jaccard_sets(&span_tokens(a), &span_tokens(b))
}

/// One-to-one greedy matching: pairs with J ≥ threshold are accepted in order
/// of (J descending, gold index, pred index) while both endpoints are free.
pub fn match_spans(gold: &LabelSet, pred: &LabelSet, threshold: f64) -> Vec<(usize, usize)> {
    let gt: Vec<_> = gold.tuples().iter().map(|t| span_tokens(&t.span)).collect();
    let pt: Vec<_> = pred.tuples().iter().map(|t| span_tokens(&t.span)).collect();
    let mut cands = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for (j, p) in pt.iter().enumerate() {
            let s = jaccard_sets(g, p);
            if s >= threshold {
                cands.push((s, i, j));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_g = vec![false; gt.len()];
    let mut used_p = vec![false; pt.len()];
    let mut out = Vec::new();
    for (_, i, j) in cands {
        if !used_g[i] && !used_p[j] {
            used_g[i] = true;
            used_p[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Every pair with J ≥ threshold (many-to-many alternative).
pub fn match_spans_all(gold: &LabelSet, pred: &LabelSet, threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, g) in gold.tuples().iter().enumerate() {
        for (j, p) in pred.tuples().iter().enumerate() {
            if jaccard_similarity(&g.span, &p.span) >= threshold {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    #[default]
    OneToOne,
    ManyToMany,
}

pub type CountTable = BTreeMap<String, BTreeMap<String, usize>>;
pub type DistTable = BTreeMap<String, BTreeMap<String, f64>>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionModel {
    pub code_conf: DistTable,
    pub sub_conf: DistTable,
    pub code_counts: CountTable,
    pub sub_counts: CountTable,
    pub code_match_count: usize,
    pub code_mismatch_count: usize,
    pub sub_match_count: usize,
    pub sub_mismatch_count: usize,
    pub unparseable_count: usize,
}

fn normalize(counts: &CountTable) -> DistTable {
    counts
        .iter()
        .map(|(g, row)| {
            let total: usize = row.values().sum();
            let dist = row.iter().map(|(p, &c)| (p.clone(), c as f64 / total as f64)).collect();
            (g.clone(), dist)
        })
        .collect()
}

#[derive(Default)]
struct Partial {
    code: Vec<(String, String)>,
    sub: Vec<(String, String)>,
    code_match: usize,
    sub_match: usize,
}

impl ConfusionModel {
    pub fn from_counts(code_counts: CountTable, sub_counts: CountTable) -> Self {
        let code_mismatch_count = code_counts.values().flat_map(|r| r.values()).sum();
        let sub_mismatch_count = sub_counts.values().flat_map(|r| r.values()).sum();
        ConfusionModel {
            code_conf: normalize(&code_counts),
            sub_conf: normalize(&sub_counts),
            code_counts,
            sub_counts,
            code_mismatch_count,
            sub_mismatch_count,
            ..Default::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("confusion model serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<(), PrefError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self, PrefError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| PrefError::Format {
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Total mass of predicted labels across all gold rows, per level.
    fn marginal(table: &CountTable) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for row in table.values() {
            for (p, &c) in row {
                *m.entry(p.clone()).or_insert(0.0) += c as f64;
            }
        }
        m
    }

    /// Count of one specific gold → pred confusion at a level.
    pub fn count(&self, level: Level, gold: &str, pred: &str) -> usize {
        let t = match level {
            Level::Code => &self.code_counts,
            Level::SubCode => &self.sub_counts,
        };
        t.get(gold).and_then(|r| r.get(pred)).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Code,
    SubCode,
}

/// Confusion counts over matched spans; `None` predictions are unparseable
/// and only counted.
pub fn extract_confusion_model(
    pairs: &[(LabelSet, Option<LabelSet>)],
    threshold: f64,
    matching: MatchMode,
    mode: ExecMode,
) -> ConfusionModel {
    let partials = map_slice(mode, pairs, |(gold, pred)| {
        let mut p = Partial::default();
        let Some(pred) = pred else { return p };
        let matches = match matching {
            MatchMode::OneToOne => match_spans(gold, pred, threshold),
            MatchMode::ManyToMany => match_spans_all(gold, pred, threshold),
        };
        for (i, j) in matches {
            let (g, q) = (&gold.tuples()[i], &pred.tuples()[j]);
            if g.code == q.code {
                p.code_match += 1;
            } else {
                p.code.push((g.code.clone(), q.code.clone()));
            }
            if g.subcode == q.subcode {
                p.sub_match += 1;
            } else {
                p.sub.push((g.subcode.clone(), q.subcode.clone()));
            }
        }
        p
    });
    let mut code_counts = CountTable::new();
    let mut sub_counts = CountTable::new();
    let (mut cm, mut sm) = (0, 0);
    for p in partials {
        for (g, q) in p.code {
            *code_counts.entry(g).or_default().entry(q).or_insert(0) += 1;
        }
        for (g, q) in p.sub {
            *sub_counts.entry(g).or_default().entry(q).or_insert(0) += 1;
        }
        cm += p.code_match;
        sm += p.sub_match;
    }
    let mut model = ConfusionModel::from_counts(code_counts, sub_counts);
    model.code_match_count = cm;
    model.sub_match_count = sm;
    model.unparseable_count = pairs.iter().filter(|(_, p)| p.is_none()).count();
    model
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Confusion,
    Deletion,
    Insertion,
    CuratedStandin,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Confusion, Family::Deletion, Family::Insertion, Family::CuratedStandin];

    pub fn name(self) -> &'static str {
        match self {
            Family::Confusion => "confusion",
            Family::Deletion => "deletion",
            Family::Insertion => "insertion",
            Family::CuratedStandin => "curated_standin",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Draws a key with probability proportional to its weight among `allowed`
/// keys; `None` when no allowed key has positive weight.
fn sample_weighted<'a, R: Rng>(
    rng: &mut R,
    weights: impl Iterator<Item = (&'a String, f64)>,
    allowed: impl Fn(&str) -> bool,
) -> Option<String> {
    let items: Vec<(&String, f64)> = weights.filter(|(k, w)| *w > 0.0 && allowed(k)).collect();
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    if items.is_empty() || total <= 0.0 {
        return None;
    }
    let mut r = rng.gen::<f64>() * total;
    for (k, w) in &items {
        r -= w;
        if r < 0.0 {
            return Some((*k).clone());
        }
    }
    items.last().map(|(k, _)| (*k).clone())
}

fn sample_uniform<R: Rng>(rng: &mut R, items: &[String]) -> Option<String> {
    items.choose(rng).cloned()
}

fn confuse_code<R: Rng>(
    rng: &mut R,
    code: &str,
    cm: &ConfusionModel,
    codebook: &Codebook,
    restrict: Option<&BTreeSet<String>>,
) -> Option<String> {
    let row = cm.code_conf.get(code);
    if let Some(targets) = restrict {
        return sample_weighted(rng, row?.iter().map(|(k, &v)| (k, v)), |k| targets.contains(k));
    }
    row.and_then(|r| sample_weighted(rng, r.iter().map(|(k, &v)| (k, v)), |k| k != code && codebook.has_code(k)))
        .or_else(|| {
            let others: Vec<String> = codebook.codes().iter().filter(|c| *c != code).cloned().collect();
            sample_uniform(rng, &others)
        })
}

fn confuse_subcode<R: Rng>(rng: &mut R, sub: &str, new_code: &str, cm: &ConfusionModel, codebook: &Codebook) -> String {
    let valid = codebook.valid_subcodes(new_code);
    if let Some(s) = cm
        .sub_conf
        .get(sub)
        .and_then(|r| sample_weighted(rng, r.iter().map(|(k, &v)| (k, v)), |k| valid.iter().any(|v| v == k)))
    {
        return s;
    }
    let others: Vec<String> = valid.iter().filter(|s| *s != sub).cloned().collect();
    // Only possible when `sub` is the new code's sole valid sub-code.
    sample_uniform(rng, &others).unwrap_or_else(|| sub.to_string())
}

/// Per-call knobs for the perturbation families.
#[derive(Debug, Clone, Default)]
pub struct PerturbOptions {
    /// Upper bound on the number of tuples the confusion families change.
    pub max_perturbed_tuples: Option<usize>,
    /// Code-level targets allowed per gold code (curated stand-in only).
    pub restricted_targets: Option<BTreeMap<String, BTreeSet<String>>>,
}

const MAX_ATTEMPTS: usize = 32;

fn unavailable(family: Family, reason: impl Into<String>) -> PrefError {
    PrefError::PerturbationUnavailable {
        family,
        reason: reason.into(),
    }
}

fn confusion_once<R: Rng>(
    gold: &LabelSet,
    cm: &ConfusionModel,
    codebook: &Codebook,
    opts: &PerturbOptions,
    rng: &mut R,
    family: Family,
) -> Result<Option<LabelSet>, PrefError> {
    let eligible: Vec<usize> = (0..gold.len())
        .filter(|&i| match &opts.restricted_targets {
            Some(t) => t.contains_key(&gold.tuples()[i].code),
            None => true,
        })
        .collect();
    if eligible.is_empty() {
        return Err(unavailable(family, "no tuple has an eligible code"));
    }
    let mut chosen = eligible;
    if let Some(cap) = opts.max_perturbed_tuples {
        chosen.shuffle(rng);
        chosen.truncate(cap.max(1));
        chosen.sort_unstable();
    }
    let mut tuples = gold.tuples().to_vec();
    for &i in &chosen {
        let t = &gold.tuples()[i];
        let restrict = opts.restricted_targets.as_ref().and_then(|m| m.get(&t.code));
        let new_code = match confuse_code(rng, &t.code, cm, codebook, restrict) {
            Some(c) => c,
            None => {
                let new_sub = confuse_subcode(rng, &t.subcode, &t.code, cm, codebook);
                tuples[i] = AnnotationTuple::new(t.code.clone(), new_sub, t.span.clone());
                continue;
            }
        };
        let new_sub = confuse_subcode(rng, &t.subcode, &new_code, cm, codebook);
        tuples[i] = AnnotationTuple::new(new_code, new_sub, t.span.clone());
    }
    match LabelSet::new(tuples) {
        Ok(ls) if ls != *gold => Ok(Some(ls)),
        _ => Ok(None),
    }
}

/// One rejected label set from `gold` under the given family. The result is
/// always hierarchy-valid and differs from `gold`.
pub fn perturb_label_set<R: Rng>(
    gold: &LabelSet,
    family: Family,
    cm: &ConfusionModel,
    codebook: &Codebook,
    opts: &PerturbOptions,
    rng: &mut R,
) -> Result<LabelSet, PrefError> {
    if gold.is_empty() {
        return Err(unavailable(family, "gold label set is empty"));
    }
    match family {
        Family::Deletion => {
            let drop = rng.gen_range(0..gold.len());
            let kept = gold.tuples().iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, t)| t.clone());
            Ok(LabelSet::new(kept.collect()).expect("subset of a valid set"))
        }
        Family::Insertion => {
            let code_m = ConfusionModel::marginal(&cm.code_counts);
            let sub_m = ConfusionModel::marginal(&cm.sub_counts);
            for _ in 0..MAX_ATTEMPTS {
                let code = sample_weighted(rng, code_m.iter().map(|(k, &v)| (k, v)), |k| codebook.has_code(k))
                    .or_else(|| sample_uniform(rng, codebook.codes()))
                    .expect("codebook has codes");
                let valid = codebook.valid_subcodes(&code);
                let sub = sample_weighted(rng, sub_m.iter().map(|(k, &v)| (k, v)), |k| valid.iter().any(|v| v == k))
                    .or_else(|| sample_uniform(rng, valid))
                    .expect("every code has sub-codes");
                let source = &gold.tuples()[rng.gen_range(0..gold.len())].span;
                let chars: Vec<char> = source.chars().collect();
                let n = chars.len();
                // Uniform over the n(n+1)/2 contiguous substrings.
                let mut k = rng.gen_range(0..n * (n + 1) / 2);
                let mut start = 0;
                while k >= n - start {
                    k -= n - start;
                    start += 1;
                }
                let span: String = chars[start..start + k + 1].iter().collect();
                let t = AnnotationTuple::new(code, sub, span);
                if !gold.contains(&t) {
                    let mut tuples = gold.tuples().to_vec();
                    tuples.push(t);
                    return Ok(LabelSet::new(tuples).expect("new tuple is distinct"));
                }
            }
            Err(unavailable(family, "every sampled insertion duplicated a gold tuple"))
        }
        Family::Confusion | Family::CuratedStandin => {
            for _ in 0..MAX_ATTEMPTS {
                if let Some(ls) = confusion_once(gold, cm, codebook, opts, rng, family)? {
                    return Ok(ls);
                }
            }
            Err(unavailable(family, "no label-changing substitution found"))
        }
    }
}

/// The most-confused code pairs: the top quartile (at least one pair) of
/// code-level confusions by count, ties broken by label names.
pub fn top_confused_pairs(cm: &ConfusionModel) -> BTreeMap<String, BTreeSet<String>> {
    let mut pairs: Vec<(usize, &String, &String)> = cm
        .code_counts
        .iter()
        .flat_map(|(g, row)| row.iter().map(move |(p, &c)| (c, g, p)))
        .collect();
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)).then(a.2.cmp(b.2)));
    let keep = pairs.len().div_ceil(4);
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (_, g, p) in pairs.into_iter().take(keep) {
        out.entry(g.clone()).or_default().insert(p.clone());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub id: String,
    pub prompt: String,
    pub chosen: LabelSet,
    pub rejected: LabelSet,
    pub family: Family,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrefConfig {
    /// Relative weights of the confusion, deletion and insertion families.
    pub mixture: [f64; 3],
    pub standin_fraction: f64,
    pub n_triples: usize,
    pub seed: u64,
    pub max_perturbed_tuples: Option<usize>,
}

impl Default for PrefConfig {
    fn default() -> Self {
        PrefConfig {
            mixture: [0.5, 0.25, 0.25],
            standin_fraction: 0.4,
            n_triples: 2000,
            seed: 0,
            max_perturbed_tuples: None,
        }
    }
}

impl PrefConfig {
    pub fn validate(&self) -> Result<(), PrefError> {
        if self.mixture.iter().any(|w| !w.is_finite() || *w < 0.0) || self.mixture.iter().sum::<f64>() <= 0.0 {
            return Err(PrefError::InvalidConfig("mixture weights must be non-negative and not all zero".into()));
        }
        if !(0.0..=1.0).contains(&self.standin_fraction) {
            return Err(PrefError::InvalidConfig("standin_fraction must lie in [0, 1]".into()));
        }
        if self.max_perturbed_tuples == Some(0) {
            return Err(PrefError::InvalidConfig("max_perturbed_tuples must be at least 1".into()));
        }
        Ok(())
    }

    /// Requested share of each family.
    pub fn proportions(&self) -> BTreeMap<Family, f64> {
        let total: f64 = self.mixture.iter().sum();
        let rest = 1.0 - self.standin_fraction;
        let mut out = BTreeMap::new();
        out.insert(Family::Confusion, rest * self.mixture[0] / total);
        out.insert(Family::Deletion, rest * self.mixture[1] / total);
        out.insert(Family::Insertion, rest * self.mixture[2] / total);
        out.insert(Family::CuratedStandin, self.standin_fraction);
        out
    }

    /// Largest-remainder allocation of `n_triples` to families.
    pub fn quotas(&self) -> BTreeMap<Family, usize> {
        let props = self.proportions();
        let n = self.n_triples as f64;
        let mut quotas: BTreeMap<Family, usize> = props.iter().map(|(f, p)| (*f, (p * n).floor() as usize)).collect();
        let mut left = self.n_triples - quotas.values().sum::<usize>();
        let mut rems: Vec<(f64, Family)> = props.iter().map(|(f, p)| (p * n - (p * n).floor(), *f)).collect();
        rems.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, f) in rems {
            if left == 0 {
                break;
            }
            if props[&f] > 0.0 {
                *quotas.get_mut(&f).expect("family") += 1;
                left -= 1;
            }
        }
        quotas
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pub triples: Vec<PreferenceTriple>,
    /// Perturbation attempts skipped because no valid perturbation existed.
    pub skipped: BTreeMap<Family, usize>,
}

/// Deterministic triple generation. Family slots follow the quota allocation
/// in shuffled order; examples are visited in reshuffled passes and an
/// example that cannot be perturbed under a family is skipped and counted.
pub fn build_preference_dataset(
    examples: &[Example],
    cm: &ConfusionModel,
    codebook: &Codebook,
    cfg: &PrefConfig,
) -> Result<PreferenceDataset, PrefError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut slots: Vec<Family> = Vec::with_capacity(cfg.n_triples);
    for (f, q) in cfg.quotas() {
        slots.extend(std::iter::repeat_n(f, q));
    }
    slots.shuffle(&mut rng);
    let mut skipped = BTreeMap::new();
    if slots.is_empty() {
        return Ok(PreferenceDataset {
            triples: Vec::new(),
            skipped,
        });
    }
    if examples.is_empty() {
        return Err(PrefError::InvalidConfig("no examples to build preferences from".into()));
    }
    let plain = PerturbOptions {
        max_perturbed_tuples: cfg.max_perturbed_tuples,
        restricted_targets: None,
    };
    let standin = PerturbOptions {
        max_perturbed_tuples: cfg.max_perturbed_tuples,
        // Without any observed confusion the stand-in stream degrades to the
        // unrestricted confusion family.
        restricted_targets: Some(top_confused_pairs(cm)).filter(|m| !m.is_empty()),
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut triples = Vec::with_capacity(slots.len());
    for family in slots {
        let opts = if family == Family::CuratedStandin { &standin } else { &plain };
        let mut failures = 0usize;
        loop {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &examples[order[cursor]];
            cursor += 1;
            // An empty rejected output has no field tokens, so its weighted
            // aggregate is undefined under length normalization.
            let outcome = perturb_label_set(&ex.gold, family, cm, codebook, opts, &mut rng).and_then(|r| {
                if r.is_empty() {
                    Err(unavailable(family, "rejected output would be empty"))
                } else {
                    Ok(r)
                }
            });
            match outcome {
                Ok(rejected) => {
                    triples.push(PreferenceTriple {
                        id: ex.id.clone(),
                        prompt: ex.prompt(),
                        chosen: ex.gold.clone(),
                        rejected,
                        family,
                    });
                    break;
                }
                Err(e @ PrefError::PerturbationUnavailable { .. }) => {
                    *skipped.entry(family).or_insert(0) += 1;
                    failures += 1;
                    if failures >= examples.len() {
                        return Err(e);
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(PreferenceDataset { triples, skipped })
}

pub fn triples_to_jsonl(triples: &[PreferenceTriple]) -> String {
    let mut out = String::new();
    for t in triples {
        out.push_str(&serde_json::to_string(t).expect("triple serializes"));
        out.push('\n');
    }
    out
}

pub fn write_preferences(path: &Path, triples: &[PreferenceTriple]) -> Result<(), PrefError> {
    fs::write(path, triples_to_jsonl(triples))?;
    Ok(())
}

pub fn read_preferences(path: &Path) -> Result<Vec<PreferenceTriple>, PrefError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PrefError::Format {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls(items: &[(&str, &str, &str)]) -> LabelSet {
        LabelSet::new(items.iter().map(|(c, s, p)| AnnotationTuple::new(*c, *s, *p)).collect()).unwrap()
    }

    fn codebook() -> Codebook {
        let mut h = BTreeMap::new();
        h.insert("A".to_string(), vec!["a1".to_string(), "a2".to_string()]);
        h.insert("B".to_string(), vec!["b1".to_string()]);
        h.insert("C".to_string(), vec!["None".to_string()]);
        Codebook::new(
            vec!["A".into(), "B".into(), "C".into()],
            vec!["a1".into(), "a2".into(), "b1".into(), "None".into()],
            h,
        )
        .unwrap()
    }

    #[test]
    fn jaccard_values() {
        assert_eq!(jaccard_similarity("x y", "x y"), 1.0);
        assert_eq!(jaccard_similarity("a b c", "b c d"), 0.5);
        assert_eq!(jaccard_similarity("a b", "c d"), 0.0);
        assert_eq!(jaccard_similarity("", ""), 1.0);
        assert_eq!(jaccard_similarity("A b", "a B"), 1.0);
    }

    #[test]
    fn greedy_match_prefers_higher_similarity() {
        // J = 9/10 and 7/10 against the same gold span.
        let g = ls(&[("A", "a1", "w1 w2 w3 w4 w5 w6 w7 w8 w9")]);
        let p = ls(&[
            ("A", "a1", "w1 w2 w3 w4 w5 w6 w7 x1 x2 x3"),
            ("A", "a2", "w1 w2 w3 w4 w5 w6 w7 w8 w9 x1"),
        ]);
        assert_eq!(jaccard_similarity(&g.tuples()[0].span, &p.tuples()[1].span), 0.9);
        assert_eq!(match_spans(&g, &p, 0.6), vec![(0, 1)]);
        assert!(match_spans(&ls(&[("A", "a1", "a b c")]), &ls(&[("A", "a1", "a x y")]), 0.6).is_empty());
        let same = ls(&[("A", "a1", "p q"), ("B", "b1", "r s")]);
        assert_eq!(match_spans(&same, &same, 0.6), vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn confusion_counts_normalize() {
        let g = ls(&[("A", "a1", "one two")]);
        let mut pairs = Vec::new();
        for _ in 0..3 {
            pairs.push((g.clone(), Some(ls(&[("B", "b1", "one two")]))));
        }
        pairs.push((g.clone(), Some(ls(&[("C", "None", "one two")]))));
        pairs.push((g.clone(), None));
        let cm = extract_confusion_model(&pairs, 0.6, MatchMode::OneToOne, ExecMode::Sequential);
        assert_eq!(cm.code_conf["A"]["B"], 0.75);
        assert_eq!(cm.code_conf["A"]["C"], 0.25);
        assert_eq!(cm.unparseable_count, 1);
        let ident = extract_confusion_model(&[(g.clone(), Some(g))], 0.6, MatchMode::OneToOne, ExecMode::Sequential);
        assert!(ident.code_conf.is_empty() && ident.sub_conf.is_empty());
        assert_eq!(ident.code_match_count, 1);
    }

    #[test]
    fn families_keep_their_shape() {
        let cb = codebook();
        let cm = ConfusionModel::default();
        let gold = ls(&[("A", "a1", "the cat sat"), ("B", "b1", "on the mat"), ("C", "None", "today")]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let opts = PerturbOptions::default();
        for _ in 0..200 {
            let d = perturb_label_set(&gold, Family::Deletion, &cm, &cb, &opts, &mut rng).unwrap();
            assert!(d.is_strict_subset_of(&gold) && d.len() == 2);
            let i = perturb_label_set(&gold, Family::Insertion, &cm, &cb, &opts, &mut rng).unwrap();
            assert!(gold.is_strict_subset_of(&i) && i.len() == 4);
            let added = &i.tuples()[3];
            assert!(cb.is_valid_pair(&added.code, &added.subcode));
            assert!(gold.tuples().iter().any(|t| t.span.contains(&added.span)));
            let c = perturb_label_set(&gold, Family::Confusion, &cm, &cb, &opts, &mut rng).unwrap();
            assert_eq!(c.len(), 3);
            assert_ne!(c, gold);
            for (a, b) in c.tuples().iter().zip(gold.tuples()) {
                assert_eq!(a.span, b.span);
                assert!(cb.is_valid_pair(&a.code, &a.subcode));
            }
        }
        assert!(matches!(
            perturb_label_set(&LabelSet::empty(), Family::Deletion, &cm, &cb, &opts, &mut rng),
            Err(PrefError::PerturbationUnavailable { .. })
        ));
    }

    #[test]
    fn quotas_follow_proportions() {
        let cfg = PrefConfig {
            n_triples: 1000,
            ..PrefConfig::default()
        };
        let q = cfg.quotas();
        assert_eq!(q.values().sum::<usize>(), 1000);
        assert_eq!(q[&Family::CuratedStandin], 400);
        assert_eq!(q[&Family::Confusion], 300);
        let zero = PrefConfig {
            n_triples: 0,
            ..PrefConfig::default()
        };
        let out = build_preference_dataset(&[], &ConfusionModel::default(), &codebook(), &zero).unwrap();
        assert!(out.triples.is_empty());
        let bad = PrefConfig {
            mixture: [0.0; 3],
            ..PrefConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
