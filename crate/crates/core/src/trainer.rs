//! Two-stage training: supervised fine-tuning, then preference optimization
//! from the SFT parameters against a frozen copy of them.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::confusion::PreferenceTriple;
use crate::objectives::{
    example_class_weight, prepare_pair_with_reference, sft_loss_and_grad, tabpo_batch_loss, tabpo_batch_loss_and_grad,
    LogisticPreference, ObjectiveConfig, ObjectiveError, PreparedPair, WeightConfig,
};
use crate::parallel::{self, ExecMode};
use crate::policy::{ModelConfig, Policy, PolicyError};
use crate::schema::{encode_prompt, tokenize_labels, Example, TokenizedCompletion};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: loss {value}")]
    Divergence { step: usize, value: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    /// Preference-stage learning rate and step budget.
    pub lr: f64,
    pub steps: usize,
    pub sft_lr: f64,
    pub sft_steps: usize,
    pub sft_batch_size: usize,
    /// Preference pairs per step.
    pub batch_size: usize,
    pub grad_accum: usize,
    pub seed: u64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub exec: ExecMode,
    pub max_new_tokens: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lr: 1e-3,
            steps: 2000,
            sft_lr: 1e-2,
            sft_steps: 2000,
            sft_batch_size: 8,
            batch_size: 8,
            grad_accum: 1,
            seed: 0,
            warmup_frac: 0.1,
            weight_decay: 0.0,
            exec: ExecMode::Parallel,
            max_new_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub weights: WeightConfig,
    pub train: TrainSettings,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let t = &self.train;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(t.lr.is_finite() && t.lr >= 0.0 && t.sft_lr.is_finite() && t.sft_lr >= 0.0) {
            return bad("learning rates must be finite and >= 0");
        }
        if t.batch_size == 0 || t.sft_batch_size == 0 || t.grad_accum == 0 {
            return bad("batch sizes and grad_accum must be >= 1");
        }
        if !(0.0..=1.0).contains(&t.warmup_frac) {
            return bad("warmup_frac must lie in [0, 1]");
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        self.model.validate()?;
        self.objective.validate()?;
        self.weights.validate()?;
        Ok(())
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
            params[i] -= lr * (update + self.weight_decay * params[i]);
        }
    }
}

/// Linear warmup over the first `warmup_frac` of the run, constant after.
pub fn lr_at(step: usize, steps: usize, base: f64, warmup_frac: f64) -> f64 {
    let warm = (warmup_frac * steps as f64).ceil() as usize;
    if warm == 0 || step >= warm {
        base
    } else {
        base * (step + 1) as f64 / warm as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub barrier_activation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen_loglik: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rejected_loglik: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ref_chosen_loglik: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_delta: Option<f64>,
}

/// Append-only per-step log. Wall time is kept apart from the records so the
/// serialized log is reproducible.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    pub wall_seconds: f64,
}

impl RunLog {
    pub fn push(&mut self, r: StepRecord) {
        debug_assert!(self.records.last().is_none_or(|l| l.step < r.step));
        self.records.push(r);
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

/// Deterministic batch sampler cycling through reshuffled epochs.
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Sampler { order, cursor: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

pub fn tokenize_examples(examples: &[Example]) -> Vec<TokenizedCompletion> {
    examples.iter().map(|e| tokenize_labels(&e.prompt(), &e.gold)).collect()
}

/// Supervised stage on gold completions from freshly initialized parameters.
pub fn run_sft(cfg: &TrainConfig, train: &[Example]) -> Result<(Policy, RunLog), TrainError> {
    let data = tokenize_examples(train);
    run_sft_from(cfg, Policy::init(cfg.model.clone())?, &data)
}

pub fn run_sft_from(cfg: &TrainConfig, mut policy: Policy, data: &[TokenizedCompletion]) -> Result<(Policy, RunLog), TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Config("SFT corpus is empty".into()));
    }
    let t = &cfg.train;
    let start = Instant::now();
    let mut opt = AdamW::new(policy.num_params(), t.weight_decay);
    let mut sampler = Sampler::new(data.len(), t.seed);
    let mut log = RunLog::default();
    for step in 0..t.sft_steps {
        let mut grad = vec![0.0; policy.num_params()];
        let mut loss = 0.0;
        for _ in 0..t.grad_accum {
            let batch: Vec<TokenizedCompletion> =
                sampler.next_batch(t.sft_batch_size).into_iter().map(|i| data[i].clone()).collect();
            let (l, g) = match sft_loss_and_grad(&policy, &batch, t.exec) {
                Err(ObjectiveError::Policy(PolicyError::NonFiniteLoss(value))) => {
                    return Err(TrainError::Divergence { step, value })
                }
                r => r?,
            };
            loss += l / t.grad_accum as f64;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b / t.grad_accum as f64;
            }
        }
        if !loss.is_finite() {
            return Err(TrainError::Divergence { step, value: loss });
        }
        let lr = lr_at(step, t.sft_steps, t.sft_lr, t.warmup_frac);
        opt.step(policy.params_mut(), &grad, lr);
        log.push(StepRecord {
            step,
            lr,
            loss,
            barrier_activation: None,
            chosen_loglik: None,
            rejected_loglik: None,
            ref_chosen_loglik: None,
            mean_delta: None,
        });
    }
    log.wall_seconds = start.elapsed().as_secs_f64();
    Ok((policy, log))
}

/// Tokenized triples with the frozen reference's completion log-probs; shared
/// by every objective variant trained against the same reference.
#[derive(Debug, Clone)]
pub struct ReferenceCache {
    pub chosen: Vec<TokenizedCompletion>,
    pub rejected: Vec<TokenizedCompletion>,
    pub ref_chosen: Vec<Vec<f64>>,
    pub ref_rejected: Vec<Vec<f64>>,
    pub golds: Vec<crate::schema::LabelSet>,
}

pub fn reference_cache(reference: &Policy, triples: &[PreferenceTriple], mode: ExecMode) -> ReferenceCache {
    let chosen: Vec<_> = triples.iter().map(|t| tokenize_labels(&t.prompt, &t.chosen)).collect();
    let rejected: Vec<_> = triples.iter().map(|t| tokenize_labels(&t.prompt, &t.rejected)).collect();
    let ref_chosen = parallel::map_slice(mode, &chosen, |tc| reference.sequence_log_probs(tc.into()));
    let ref_rejected = parallel::map_slice(mode, &rejected, |tc| reference.sequence_log_probs(tc.into()));
    ReferenceCache {
        chosen,
        rejected,
        ref_chosen,
        ref_rejected,
        golds: triples.iter().map(|t| t.chosen.clone()).collect(),
    }
}

/// Fixes token weights, reference aggregates and class weights for one
/// objective variant.
pub fn prepare_from_cache(
    cache: &ReferenceCache,
    frequencies: &BTreeMap<String, usize>,
    objective: &ObjectiveConfig,
    weights: &WeightConfig,
    mode: ExecMode,
) -> Result<Vec<PreparedPair>, TrainError> {
    let prepared = parallel::map_indexed(mode, cache.chosen.len(), |i| {
        let cw = if objective.class_balance {
            example_class_weight(&cache.golds[i], frequencies, objective)?
        } else {
            1.0
        };
        prepare_pair_with_reference(
            cache.chosen[i].clone(),
            cache.rejected[i].clone(),
            &cache.ref_chosen[i],
            &cache.ref_rejected[i],
            objective,
            weights,
            cw,
        )
    });
    Ok(prepared.into_iter().collect::<Result<Vec<_>, _>>()?)
}

/// Tokenizes triples and fixes their weights, reference aggregates and class
/// weights against `reference`.
pub fn prepare_triples(
    reference: &Policy,
    triples: &[PreferenceTriple],
    frequencies: &BTreeMap<String, usize>,
    objective: &ObjectiveConfig,
    weights: &WeightConfig,
    mode: ExecMode,
) -> Result<Vec<PreparedPair>, TrainError> {
    prepare_from_cache(&reference_cache(reference, triples, mode), frequencies, objective, weights, mode)
}

/// Preference stage. The policy starts at `sft` and the reference is an
/// untouched copy of it.
pub fn run_tabpo(
    cfg: &TrainConfig,
    sft: &Policy,
    triples: &[PreferenceTriple],
    frequencies: &BTreeMap<String, usize>,
) -> Result<(Policy, RunLog), TrainError> {
    cfg.validate()?;
    if triples.is_empty() {
        return Err(TrainError::Config("preference set is empty".into()));
    }
    let reference = sft.clone();
    let pairs = prepare_triples(&reference, triples, frequencies, &cfg.objective, &cfg.weights, cfg.train.exec)?;
    run_tabpo_prepared(cfg, sft.clone(), &pairs)
}

pub fn run_tabpo_prepared(cfg: &TrainConfig, mut policy: Policy, pairs: &[PreparedPair]) -> Result<(Policy, RunLog), TrainError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::Config("preference set is empty".into()));
    }
    let t = &cfg.train;
    let start = Instant::now();
    let mut opt = AdamW::new(policy.num_params(), t.weight_decay);
    let mut sampler = Sampler::new(pairs.len(), t.seed);
    let mut log = RunLog::default();
    for step in 0..t.steps {
        let mut grad = vec![0.0; policy.num_params()];
        let mut loss = 0.0;
        let mut rec = StepRecord {
            step,
            lr: lr_at(step, t.steps, t.lr, t.warmup_frac),
            loss: 0.0,
            barrier_activation: Some(0.0),
            chosen_loglik: Some(0.0),
            rejected_loglik: Some(0.0),
            ref_chosen_loglik: Some(0.0),
            mean_delta: Some(0.0),
        };
        let k = t.grad_accum as f64;
        for _ in 0..t.grad_accum {
            let batch: Vec<PreparedPair> =
                sampler.next_batch(t.batch_size).into_iter().map(|i| pairs[i].clone()).collect();
            let (l, g, s) = match tabpo_batch_loss_and_grad(&policy, &batch, &cfg.objective, &LogisticPreference, t.exec) {
                Err(ObjectiveError::Policy(PolicyError::NonFiniteLoss(value))) => {
                    return Err(TrainError::Divergence { step, value })
                }
                r => r?,
            };
            loss += l / k;
            parallel::add_assign(&mut grad, &g);
            let add = |slot: &mut Option<f64>, v: f64| *slot = slot.map(|x| x + v / k);
            add(&mut rec.barrier_activation, s.barrier_activation);
            add(&mut rec.chosen_loglik, s.mean_chosen_loglik);
            add(&mut rec.rejected_loglik, s.mean_rejected_loglik);
            add(&mut rec.ref_chosen_loglik, s.mean_ref_chosen_loglik);
            add(&mut rec.mean_delta, s.mean_delta);
        }
        if t.grad_accum > 1 {
            grad.iter_mut().for_each(|x| *x /= k);
        }
        if !loss.is_finite() {
            return Err(TrainError::Divergence { step, value: loss });
        }
        rec.loss = loss;
        opt.step(policy.params_mut(), &grad, rec.lr);
        log.push(rec);
    }
    log.wall_seconds = start.elapsed().as_secs_f64();
    Ok((policy, log))
}

/// Mean reference-adjusted advantage over prepared pairs.
pub fn mean_delta(policy: &Policy, pairs: &[PreparedPair], objective: &ObjectiveConfig) -> Result<f64, TrainError> {
    Ok(tabpo_batch_loss(policy, pairs, objective, &LogisticPreference)?.1.mean_delta)
}

/// Greedy predictions for each example's prompt.
pub fn predict(policy: &Policy, examples: &[Example], max_new_tokens: usize, mode: ExecMode) -> Vec<String> {
    parallel::map_slice(mode, examples, |e| policy.greedy_decode(&encode_prompt(&e.prompt()), max_new_tokens, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{AnnotationTuple, Direction, LabelSet};

    fn example() -> Example {
        Example {
            id: "e0".into(),
            message: "hi there".into(),
            direction: Direction::Y,
            gold: LabelSet::new(vec![AnnotationTuple::new("A", "a", "hi")]).unwrap(),
        }
    }

    fn tiny() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model.context_window = 4;
        cfg.model.embed_dim = 4;
        cfg.model.hidden_dim = 8;
        cfg.model.prompt_buckets = 8;
        cfg.train.sft_steps = 5;
        cfg.train.sft_batch_size = 1;
        cfg
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(lr_at(0, 100, 1.0, 0.1), 0.1);
        assert_eq!(lr_at(9, 100, 1.0, 0.1), 1.0);
        assert_eq!(lr_at(50, 100, 1.0, 0.1), 1.0);
        assert_eq!(lr_at(0, 10, 1.0, 0.0), 1.0);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut cfg = tiny();
        cfg.train.sft_lr = 0.0;
        let init = Policy::init(cfg.model.clone()).unwrap();
        let (p, log) = run_sft(&cfg, &[example()]).unwrap();
        assert_eq!(p, init);
        assert_eq!(log.records.len(), 5);
    }

    #[test]
    fn sft_is_deterministic() {
        let cfg = tiny();
        let (a, la) = run_sft(&cfg, &[example()]).unwrap();
        let (b, lb) = run_sft(&cfg, &[example()]).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(la.to_jsonl(), lb.to_jsonl());
    }

    #[test]
    fn config_errors() {
        let mut cfg = tiny();
        cfg.train.batch_size = 0;
        assert!(matches!(run_sft(&cfg, &[example()]), Err(TrainError::Config(_))));
        assert!(matches!(run_sft(&tiny(), &[]), Err(TrainError::Config(_))));
        let p = Policy::init(tiny().model).unwrap();
        assert!(matches!(run_tabpo(&tiny(), &p, &[], &BTreeMap::new()), Err(TrainError::Config(_))));
    }

    #[test]
    fn huge_lr_diverges_or_stays_finite() {
        let mut cfg = tiny();
        cfg.train.sft_lr = 1e300;
        cfg.train.sft_steps = 50;
        match run_sft(&cfg, &[example()]) {
            Err(TrainError::Divergence { .. }) | Ok(_) => {}
            Err(e) => panic!("unexpected {e}"),
        }
    }
}
