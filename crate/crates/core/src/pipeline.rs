//! End-to-end experiment runner: one shared SFT model, then preference
//! optimization arms over a seed list, each scored on the test split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::diff_positions;
use crate::config::RunConfig;
use crate::confusion::{
    build_preference_dataset, extract_confusion_model, ConfusionModel, MatchMode, PrefError, PreferenceTriple,
};
use crate::eval::{evaluate_parsed, leaf_confusion_counts, parse_predictions, MetricsReport};
use crate::objectives::ObjectiveConfig;
use crate::policy::Policy;
use crate::schema::{Codebook, Example, LabelSet};
use crate::synth::{generate_corpus, stratified_split, Corpus, SynthError};
use crate::trainer::{
    predict, prepare_from_cache, reference_cache, run_sft, run_tabpo_prepared, ReferenceCache, RunLog, TrainError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Pref(#[from] PrefError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Corpus, codebook and the three splits.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub codebook: Codebook,
    pub corpus: Corpus,
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<ExperimentData, PipelineError> {
    let (codebook, corpus) = generate_corpus(&cfg.data.task)?;
    let [train, val, test] = stratified_split(&corpus, cfg.data.ratios, cfg.data.split_seed)?;
    Ok(ExperimentData {
        codebook,
        corpus,
        train,
        val,
        test,
    })
}

/// One preference-optimization variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub objective: ObjectiveConfig,
    /// Cap on perturbed tuples per confusion triple (`None`: every tuple).
    pub max_perturbed_tuples: Option<usize>,
}

impl ArmSpec {
    pub fn new(name: &str, objective: ObjectiveConfig, cap: Option<usize>) -> Self {
        ArmSpec {
            name: name.to_string(),
            objective,
            max_perturbed_tuples: cap,
        }
    }
}

pub fn toggle_name(ln: bool, cb: bool, tw: bool) -> String {
    let parts: Vec<&str> = [(ln, "LN"), (cb, "CB"), (tw, "TW")]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
    if parts.is_empty() {
        "plain".to_string()
    } else {
        parts.join("+")
    }
}

/// The 2³ grid over length normalization, class balancing and token
/// weighting, all other settings taken from `base`.
pub fn toggle_grid(base: &ObjectiveConfig) -> Vec<ArmSpec> {
    let mut arms = Vec::new();
    for mask in 0..8u8 {
        let (ln, cb, tw) = (mask & 4 != 0, mask & 2 != 0, mask & 1 != 0);
        let objective = ObjectiveConfig {
            length_norm: ln,
            class_balance: cb,
            token_weighting: tw,
            ..base.clone()
        };
        arms.push(ArmSpec::new(&toggle_name(ln, cb, tw), objective, None));
    }
    arms
}

pub const TABPO_ARM: &str = "LN+CB+TW";
pub const DPO_ARM: &str = "dpo";
pub const LOW_SEPARATION_ARM: &str = "LN+CB+TW@low_separation";

/// Toggle grid plus sequence-level DPO and the low-separation preset (one
/// perturbed tuple per confusion triple).
pub fn standard_arms(base: &ObjectiveConfig) -> Vec<ArmSpec> {
    let mut arms = toggle_grid(base);
    arms.push(ArmSpec::new(DPO_ARM, ObjectiveConfig::plain_dpo(base.beta), None));
    arms.push(ArmSpec::new(LOW_SEPARATION_ARM, base.clone(), Some(1)));
    arms
}

type LeafCounts = BTreeMap<(String, String), usize>;

#[derive(Debug, Clone)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub report: MetricsReport,
    pub leaf_confusions: LeafCounts,
    pub log: RunLog,
    pub predictions: Vec<String>,
    /// Mean fraction of chosen completion tokens that differ from the
    /// aligned rejected completion.
    pub separation: f64,
}

impl ArmRun {
    /// Largest relative drop of the mean chosen log-likelihood below the
    /// reference value over the run (0 when it never falls).
    pub fn max_chosen_drop(&self) -> f64 {
        self.log
            .records
            .iter()
            .filter_map(|r| Some((r.chosen_loglik?, r.ref_chosen_loglik?)))
            .map(|(c, r)| if r < 0.0 { (c - r) / r } else { 0.0 })
            .fold(0.0, |a, b| if b > a { b } else { a })
    }
}

#[derive(Debug, Clone)]
pub struct SftStage {
    pub policy: Policy,
    pub log: RunLog,
    pub test_predictions: Vec<String>,
    pub test_report: MetricsReport,
    pub test_leaf_confusions: LeafCounts,
    pub confusion: ConfusionModel,
}

pub fn score(examples: &[Example], predictions: &[String], codebook: &Codebook, cfg: &RunConfig) -> (MetricsReport, LeafCounts) {
    let pairs: Vec<(LabelSet, String)> =
        examples.iter().zip(predictions).map(|(e, p)| (e.gold.clone(), p.clone())).collect();
    let parsed = parse_predictions(&pairs, codebook);
    (evaluate_parsed(&parsed, &cfg.data.eval, cfg.train.exec), leaf_confusion_counts(&parsed))
}

/// SFT on train, then validation predictions for the confusion model and
/// test predictions for the baseline row.
pub fn run_sft_stage(cfg: &RunConfig, data: &ExperimentData) -> Result<SftStage, PipelineError> {
    let (policy, log) = run_sft(&cfg.training(), &data.train.examples)?;
    sft_stage_from(cfg, data, policy, log)
}

pub fn sft_stage_from(cfg: &RunConfig, data: &ExperimentData, policy: Policy, log: RunLog) -> Result<SftStage, PipelineError> {
    let t = &cfg.train;
    let val_preds = predict(&policy, &data.val.examples, t.max_new_tokens, t.exec);
    let confusion = confusion_from_predictions(cfg, &data.val.examples, &val_preds, &data.codebook);
    let test_predictions = predict(&policy, &data.test.examples, t.max_new_tokens, t.exec);
    let (test_report, test_leaf_confusions) = score(&data.test.examples, &test_predictions, &data.codebook, cfg);
    Ok(SftStage {
        policy,
        log,
        test_predictions,
        test_report,
        test_leaf_confusions,
        confusion,
    })
}

pub fn confusion_from_predictions(
    cfg: &RunConfig,
    examples: &[Example],
    predictions: &[String],
    codebook: &Codebook,
) -> ConfusionModel {
    let pairs: Vec<(LabelSet, String)> =
        examples.iter().zip(predictions).map(|(e, p)| (e.gold.clone(), p.clone())).collect();
    extract_confusion_model(
        &parse_predictions(&pairs, codebook),
        cfg.data.eval.jaccard_threshold,
        MatchMode::OneToOne,
        cfg.train.exec,
    )
}

/// Preference triples for one seed and separation cap.
pub fn build_triples(
    cfg: &RunConfig,
    data: &ExperimentData,
    cm: &ConfusionModel,
    seed: u64,
    cap: Option<usize>,
) -> Result<Vec<PreferenceTriple>, PipelineError> {
    let mut prefs = cfg.data.prefs.clone();
    prefs.seed = seed;
    prefs.max_perturbed_tuples = cap;
    Ok(build_preference_dataset(&data.train.examples, cm, &data.codebook, &prefs)?.triples)
}

/// Runs every arm for every seed against the shared SFT stage. Within a seed,
/// arms sharing a separation cap reuse one preference set and one reference
/// cache.
pub fn run_arms(
    cfg: &RunConfig,
    data: &ExperimentData,
    sft: &SftStage,
    arms: &[ArmSpec],
    seeds: &[u64],
    mut progress: impl FnMut(&ArmRun),
) -> Result<Vec<ArmRun>, PipelineError> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let mut caches: BTreeMap<Option<usize>, ReferenceCache> = BTreeMap::new();
        for arm in arms {
            if !caches.contains_key(&arm.max_perturbed_tuples) {
                let triples = build_triples(cfg, data, &sft.confusion, seed, arm.max_perturbed_tuples)?;
                caches.insert(arm.max_perturbed_tuples, reference_cache(&sft.policy, &triples, cfg.train.exec));
            }
            let cache = &caches[&arm.max_perturbed_tuples];
            let mut tc = cfg.training();
            tc.objective = arm.objective.clone();
            tc.train.seed = seed;
            let pairs = prepare_from_cache(cache, &data.train.code_frequencies, &tc.objective, &tc.weights, tc.train.exec)?;
            let (policy, log) = run_tabpo_prepared(&tc, sft.policy.clone(), &pairs)?;
            let predictions = predict(&policy, &data.test.examples, tc.train.max_new_tokens, tc.train.exec);
            let (report, leaf_confusions) = score(&data.test.examples, &predictions, &data.codebook, cfg);
            let run = ArmRun {
                arm: arm.name.clone(),
                seed,
                report,
                leaf_confusions,
                log,
                predictions,
                separation: token_separation(cache),
            };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(runs)
}

/// Mean fraction of chosen completion tokens marked as differing from the
/// rejected completion.
pub fn token_separation(cache: &ReferenceCache) -> f64 {
    let fracs: Vec<f64> = cache
        .chosen
        .iter()
        .zip(&cache.rejected)
        .filter(|(c, _)| c.completion_len() > 0)
        .map(|(c, r)| {
            let (d, _) = diff_positions(c.completion_tokens(), r.completion_tokens());
            d.iter().filter(|&&x| x).count() as f64 / d.len() as f64
        })
        .collect();
    mean(&fracs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

/// Sample standard deviation (0 for fewer than two values).
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Mean and std of code/sub-code/span F1 per arm, arms in first-seen order.
pub fn summarize(runs: &[ArmRun]) -> Vec<SummaryRow> {
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.arm.as_str()) {
            order.push(&r.arm);
        }
    }
    let mut rows = Vec::new();
    for arm in order {
        let mine: Vec<&ArmRun> = runs.iter().filter(|r| r.arm == arm).collect();
        for (metric, get) in [
            ("code_f1", (|r: &MetricsReport| r.code.f1) as fn(&MetricsReport) -> f64),
            ("subcode_f1", |r| r.subcode.f1),
            ("span_f1", |r| r.span.f1),
        ] {
            let xs: Vec<f64> = mine.iter().map(|r| get(&r.report)).collect();
            rows.push(SummaryRow {
                arm: arm.to_string(),
                metric: metric.to_string(),
                mean: mean(&xs),
                std: sample_std(&xs),
                runs: xs.len(),
            });
        }
    }
    rows
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("arm,metric,mean,std,runs\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6},{:.6},{}\n", r.arm, r.metric, r.mean, r.std, r.runs));
    }
    s
}
