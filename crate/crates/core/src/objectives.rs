//! Loss stack: masked SFT NLL, sequence-level DPO, token-importance weights,
//! the token-weighted reference-adjusted preference term, the confidence
//! gated barrier on the preferred completion, and class-balanced
//! aggregation.
//!
//! Every loss is written twice: as a function of per-token log-probabilities
//! returning its value plus `∂L/∂ log π(y_t)` (fed to
//! [`Policy::gradient_from_coefs`]), and as a convenience wrapper taking
//! parameters directly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::diff_positions;
use crate::parallel::ExecMode;
use crate::policy::{Policy, PolicyError, Sequence};
use crate::schema::{FieldKind, LabelSet, TokenizedCompletion};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("completion has no supervised tokens")]
    EmptyCompletion,
    #[error("length normalization requested but the token-weight mass is zero")]
    ZeroWeightMass,
    #[error("no training frequency for code `{0}`")]
    MissingFrequency(String),
    #[error("invalid objective config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightConfig {
    pub w_code: f64,
    pub w_sub: f64,
    pub w_span: f64,
    pub diff_upweight: f64,
    pub normalize_mean_active: bool,
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig {
            w_code: 2.0,
            w_sub: 3.0,
            w_span: 1.5,
            diff_upweight: 2.0,
            normalize_mean_active: true,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !(ok(self.w_code) && ok(self.w_sub) && ok(self.w_span)) {
            return Err(ObjectiveError::InvalidConfig("field weights must be >= 0".into()));
        }
        if !(self.diff_upweight.is_finite() && self.diff_upweight >= 1.0) {
            return Err(ObjectiveError::InvalidConfig("diff_upweight must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub beta: f64,
    pub tau: f64,
    pub lambda_sft: f64,
    pub length_norm: bool,
    pub class_balance: bool,
    pub token_weighting: bool,
    pub rho: f64,
    pub omega_max: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            beta: 0.1,
            tau: 0.8,
            lambda_sft: 1.0,
            length_norm: true,
            class_balance: true,
            token_weighting: true,
            rho: 0.99,
            omega_max: 10.0,
        }
    }
}

impl ObjectiveConfig {
    /// Sequence-level DPO: unit weights, no normalization, no barrier, no
    /// class balancing.
    pub fn plain_dpo(beta: f64) -> Self {
        ObjectiveConfig {
            beta,
            lambda_sft: 0.0,
            length_norm: false,
            class_balance: false,
            token_weighting: false,
            ..ObjectiveConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: &str| Err(ObjectiveError::InvalidConfig(m.to_string()));
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return bad("beta must be > 0");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if !(self.lambda_sft.is_finite() && self.lambda_sft >= 0.0) {
            return bad("lambda_sft must be >= 0");
        }
        if !(self.rho >= 0.0 && self.rho < 1.0) {
            return bad("rho must lie in [0, 1)");
        }
        if !(self.omega_max.is_finite() && self.omega_max > 0.0) {
            return bad("omega_max must be > 0");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// SFT

/// Masked NLL over a batch as a functional of completion log-probs: mean over
/// completion tokens, then mean over examples.
pub fn sft_from_log_probs(log_probs: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>), ObjectiveError> {
    if log_probs.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let b = log_probs.len() as f64;
    let mut total = 0.0;
    let mut coefs = Vec::with_capacity(log_probs.len());
    for lp in log_probs {
        if lp.is_empty() {
            return Err(ObjectiveError::EmptyCompletion);
        }
        let n = lp.len() as f64;
        total += -lp.iter().sum::<f64>() / n;
        coefs.push(vec![-1.0 / (n * b); lp.len()]);
    }
    Ok((total / b, coefs))
}

fn sequences(batch: &[TokenizedCompletion]) -> Vec<Sequence<'_>> {
    batch.iter().map(Sequence::from).collect()
}

pub fn sft_loss(policy: &Policy, batch: &[TokenizedCompletion]) -> Result<f64, ObjectiveError> {
    let lps: Vec<Vec<f64>> = batch.iter().map(|tc| policy.sequence_log_probs(tc.into())).collect();
    Ok(sft_from_log_probs(&lps)?.0)
}

pub fn sft_loss_and_grad(
    policy: &Policy,
    batch: &[TokenizedCompletion],
    mode: ExecMode,
) -> Result<(f64, Vec<f64>), ObjectiveError> {
    let seqs = sequences(batch);
    let mut err = None;
    let out = policy.loss_gradient(
        &seqs,
        |lps| match sft_from_log_probs(lps) {
            Ok(v) => v,
            Err(e) => {
                err = Some(e);
                (0.0, lps.iter().map(|l| vec![0.0; l.len()]).collect())
            }
        },
        mode,
    )?;
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

// ---------------------------------------------------------------------------
// Token weights

/// Weight 1 on every completion token (token weighting disabled).
pub fn unit_weights(tc: &TokenizedCompletion) -> Vec<f64> {
    (0..tc.len())
        .map(|i| if i >= tc.completion_start { 1.0 } else { 0.0 })
        .collect()
}

/// Field-typed importance weights for `tc`, aligned to `tc.tokens`.
///
/// Field positions whose token differs from the aligned `partner` token (or
/// has no aligned partner) are multiplied by `diff_upweight`; with
/// `normalize_mean_active` the nonzero weights are rescaled to mean 1.
pub fn compute_token_weights(
    tc: &TokenizedCompletion,
    partner: Option<&TokenizedCompletion>,
    cfg: &WeightConfig,
) -> Vec<f64> {
    let mut w = vec![0.0; tc.len()];
    let fields = tc.completion_fields();
    let differs = partner.map(|p| diff_positions(tc.completion_tokens(), p.completion_tokens()).0);
    for (j, field) in fields.iter().enumerate() {
        let base = match field {
            Some(FieldKind::Code) => cfg.w_code,
            Some(FieldKind::SubCode) => cfg.w_sub,
            Some(FieldKind::Span) => cfg.w_span,
            None => continue,
        };
        let up = match &differs {
            Some(d) if d[j] => cfg.diff_upweight,
            _ => 1.0,
        };
        w[tc.completion_start + j] = base * up;
    }
    if cfg.normalize_mean_active {
        let (count, sum) = w
            .iter()
            .filter(|&&x| x != 0.0)
            .fold((0usize, 0.0), |(c, s), &x| (c + 1, s + x));
        if count > 0 {
            let scale = count as f64 / sum;
            for x in w.iter_mut() {
                *x *= scale;
            }
        }
    }
    w
}

// ---------------------------------------------------------------------------
// Weighted log-likelihood and the preference term

/// `Σ w_t log π_t`, divided by `Σ w_t` under length normalization, with its
/// partials `∂/∂ log π_t`. `weights` is aligned to the completion.
pub fn weighted_loglik_from(
    log_probs: &[f64],
    weights: &[f64],
    length_norm: bool,
) -> Result<(f64, Vec<f64>), ObjectiveError> {
    assert_eq!(log_probs.len(), weights.len());
    let raw: f64 = log_probs.iter().zip(weights).map(|(l, w)| l * w).sum();
    if !length_norm {
        return Ok((raw, weights.to_vec()));
    }
    let mass: f64 = weights.iter().sum();
    if mass == 0.0 {
        return Err(ObjectiveError::ZeroWeightMass);
    }
    Ok((raw / mass, weights.iter().map(|w| w / mass).collect()))
}

fn completion_part<'a>(tc: &TokenizedCompletion, weights: &'a [f64]) -> &'a [f64] {
    assert_eq!(weights.len(), tc.len(), "weights must align with the token sequence");
    &weights[tc.completion_start..]
}

pub fn weighted_loglik(
    policy: &Policy,
    tc: &TokenizedCompletion,
    weights: &[f64],
    length_norm: bool,
) -> Result<f64, ObjectiveError> {
    let lp = policy.sequence_log_probs(tc.into());
    Ok(weighted_loglik_from(&lp, completion_part(tc, weights), length_norm)?.0)
}

/// The four aggregates entering the reference-adjusted advantage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairAggregates {
    pub policy_chosen: f64,
    pub policy_rejected: f64,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
}

impl PairAggregates {
    pub fn delta(&self) -> f64 {
        (self.policy_chosen - self.policy_rejected) - (self.ref_chosen - self.ref_rejected)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn preference_delta(
    policy: &Policy,
    reference: &Policy,
    chosen: &TokenizedCompletion,
    rejected: &TokenizedCompletion,
    w_chosen: &[f64],
    w_rejected: &[f64],
    length_norm: bool,
) -> Result<f64, ObjectiveError> {
    let agg = PairAggregates {
        policy_chosen: weighted_loglik(policy, chosen, w_chosen, length_norm)?,
        policy_rejected: weighted_loglik(policy, rejected, w_rejected, length_norm)?,
        ref_chosen: weighted_loglik(reference, chosen, w_chosen, length_norm)?,
        ref_rejected: weighted_loglik(reference, rejected, w_rejected, length_norm)?,
    };
    Ok(agg.delta())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-log σ(β Δ)` in softplus form.
pub fn preference_loss(delta: f64, beta: f64) -> f64 {
    let z = beta * delta;
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `∂/∂Δ [-log σ(β Δ)] = -β σ(-β Δ)`.
pub fn preference_loss_grad(delta: f64, beta: f64) -> f64 {
    -beta * sigmoid(-beta * delta)
}

/// Pluggable pairwise objective over the four aggregates. Returns the loss
/// and its partials with respect to the policy's chosen and rejected
/// aggregates (reference aggregates are constants).
pub trait PreferenceObjective: Sync {
    fn name(&self) -> &str;
    fn loss(&self, agg: &PairAggregates, beta: f64) -> (f64, f64, f64);
}

/// The logistic objective shared by DPO and the token-weighted term.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogisticPreference;

impl PreferenceObjective for LogisticPreference {
    fn name(&self) -> &str {
        "logistic"
    }

    fn loss(&self, agg: &PairAggregates, beta: f64) -> (f64, f64, f64) {
        let delta = agg.delta();
        let g = preference_loss_grad(delta, beta);
        (preference_loss(delta, beta), g, -g)
    }
}

/// Sequence-level DPO computed directly from summed log-probabilities.
pub fn dpo_loss(
    policy: &Policy,
    reference: &Policy,
    chosen: &TokenizedCompletion,
    rejected: &TokenizedCompletion,
    beta: f64,
) -> f64 {
    let sum = |p: &Policy, tc: &TokenizedCompletion| p.sequence_log_probs(tc.into()).iter().sum::<f64>();
    let delta = (sum(policy, chosen) - sum(policy, rejected)) - (sum(reference, chosen) - sum(reference, rejected));
    preference_loss(delta, beta)
}

// ---------------------------------------------------------------------------
// Barrier

/// `g_t = 1[log π_t < log τ]` per completion position.
pub fn gate_from_log_probs(log_probs: &[f64], tau: f64) -> Vec<bool> {
    let threshold = tau.ln();
    log_probs.iter().map(|&l| l < threshold).collect()
}

pub fn barrier_gate(policy: &Policy, chosen: &TokenizedCompletion, tau: f64) -> Vec<bool> {
    gate_from_log_probs(&policy.sequence_log_probs(chosen.into()), tau)
}

/// Gated weighted NLL `Σ g w (−log π) / Σ g w`, exactly 0 when the gated
/// weight mass is 0. The gate is a constant mask for differentiation.
pub fn barrier_from_log_probs(log_probs: &[f64], weights: &[f64], gate: &[bool]) -> (f64, Vec<f64>) {
    assert_eq!(log_probs.len(), weights.len());
    assert_eq!(log_probs.len(), gate.len());
    let mass: f64 = weights.iter().zip(gate).filter(|(_, &g)| g).map(|(w, _)| w).sum();
    if mass == 0.0 {
        return (0.0, vec![0.0; log_probs.len()]);
    }
    let value = log_probs
        .iter()
        .zip(weights)
        .zip(gate)
        .filter(|(_, &g)| g)
        .map(|((l, w), _)| -l * w)
        .sum::<f64>()
        / mass;
    let coefs = weights
        .iter()
        .zip(gate)
        .map(|(w, &g)| if g { -w / mass } else { 0.0 })
        .collect();
    (value, coefs)
}

pub fn barrier_loss(policy: &Policy, chosen: &TokenizedCompletion, w_chosen: &[f64], gate: &[bool]) -> f64 {
    let lp = policy.sequence_log_probs(chosen.into());
    barrier_from_log_probs(&lp, completion_part(chosen, w_chosen), gate).0
}

// ---------------------------------------------------------------------------
// Class balancing

/// `η(n) = (1 − ρ) / (1 − ρ^n)`.
pub fn effective_number_weight(n: usize, rho: f64) -> f64 {
    assert!(n >= 1, "count must be at least 1");
    if rho == 0.0 {
        return 1.0;
    }
    (1.0 - rho) / (1.0 - rho.powi(n as i32))
}

/// Example weight: largest `η` over the codes present in `gold`, clipped at
/// `omega_max`. An example without codes gets weight 1.
pub fn example_class_weight(
    gold: &LabelSet,
    frequencies: &BTreeMap<String, usize>,
    cfg: &ObjectiveConfig,
) -> Result<f64, ObjectiveError> {
    let mut best: Option<f64> = None;
    for t in gold.tuples() {
        let n = match frequencies.get(&t.code) {
            Some(&n) if n > 0 => n,
            _ => return Err(ObjectiveError::MissingFrequency(t.code.clone())),
        };
        let eta = effective_number_weight(n, cfg.rho);
        best = Some(best.map_or(eta, |b: f64| b.max(eta)));
    }
    Ok(best.unwrap_or(1.0).min(cfg.omega_max))
}

/// Normalized weighted mean `Σ ω_i L_i / Σ ω_i`, or the plain mean when class
/// balancing is off.
pub fn class_balanced_aggregate(
    losses: &[f64],
    golds: &[&LabelSet],
    frequencies: &BTreeMap<String, usize>,
    cfg: &ObjectiveConfig,
) -> Result<f64, ObjectiveError> {
    assert_eq!(losses.len(), golds.len());
    if losses.is_empty() {
        return Err(ObjectiveError::InvalidConfig("empty batch".into()));
    }
    if !cfg.class_balance {
        return Ok(losses.iter().sum::<f64>() / losses.len() as f64);
    }
    let weights = golds
        .iter()
        .map(|g| example_class_weight(g, frequencies, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(weighted_mean(losses, &weights))
}

pub fn weighted_mean(values: &[f64], weights: &[f64]) -> f64 {
    let num: f64 = values.iter().zip(weights).map(|(v, w)| v * w).sum();
    num / weights.iter().sum::<f64>()
}

// ---------------------------------------------------------------------------
// Full objective

/// A tokenized preference pair with its fixed weights, reference aggregates
/// and example weight.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub chosen: TokenizedCompletion,
    pub rejected: TokenizedCompletion,
    /// Completion-aligned weights.
    pub w_chosen: Vec<f64>,
    pub w_rejected: Vec<f64>,
    pub ref_chosen: f64,
    pub ref_rejected: f64,
    pub ref_chosen_loglik: f64,
    pub class_weight: f64,
}

/// Token weights for a pair under `cfg` (unit weights when token weighting is
/// off), aligned to each sequence.
pub fn pair_weights(
    chosen: &TokenizedCompletion,
    rejected: &TokenizedCompletion,
    cfg: &ObjectiveConfig,
    wcfg: &WeightConfig,
) -> (Vec<f64>, Vec<f64>) {
    if cfg.token_weighting {
        (
            compute_token_weights(chosen, Some(rejected), wcfg),
            compute_token_weights(rejected, Some(chosen), wcfg),
        )
    } else {
        (unit_weights(chosen), unit_weights(rejected))
    }
}

pub fn prepare_pair(
    reference: &Policy,
    chosen: TokenizedCompletion,
    rejected: TokenizedCompletion,
    cfg: &ObjectiveConfig,
    wcfg: &WeightConfig,
    class_weight: f64,
) -> Result<PreparedPair, ObjectiveError> {
    let lp_c = reference.sequence_log_probs((&chosen).into());
    let lp_r = reference.sequence_log_probs((&rejected).into());
    prepare_pair_with_reference(chosen, rejected, &lp_c, &lp_r, cfg, wcfg, class_weight)
}

/// As [`prepare_pair`], from precomputed reference completion log-probs.
pub fn prepare_pair_with_reference(
    chosen: TokenizedCompletion,
    rejected: TokenizedCompletion,
    ref_lp_chosen: &[f64],
    ref_lp_rejected: &[f64],
    cfg: &ObjectiveConfig,
    wcfg: &WeightConfig,
    class_weight: f64,
) -> Result<PreparedPair, ObjectiveError> {
    let (wc, wr) = pair_weights(&chosen, &rejected, cfg, wcfg);
    let w_chosen = wc[chosen.completion_start..].to_vec();
    let w_rejected = wr[rejected.completion_start..].to_vec();
    let ref_chosen = weighted_loglik_from(ref_lp_chosen, &w_chosen, cfg.length_norm)?.0;
    let ref_rejected = weighted_loglik_from(ref_lp_rejected, &w_rejected, cfg.length_norm)?.0;
    Ok(PreparedPair {
        ref_chosen_loglik: ref_lp_chosen.iter().sum(),
        chosen,
        rejected,
        w_chosen,
        w_rejected,
        ref_chosen,
        ref_rejected,
        class_weight: if cfg.class_balance { class_weight } else { 1.0 },
    })
}

/// Per-batch diagnostics alongside the objective value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub preference_loss: f64,
    pub barrier_loss: f64,
    /// Share of preferred completion tokens whose gate is active.
    pub barrier_activation: f64,
    pub mean_delta: f64,
    pub mean_chosen_loglik: f64,
    pub mean_rejected_loglik: f64,
    pub mean_ref_chosen_loglik: f64,
}

/// Objective value and per-token coefficients for a prepared batch; log-probs
/// are laid out as `[chosen_0, rejected_0, chosen_1, …]`.
pub fn tabpo_from_log_probs(
    batch: &[PreparedPair],
    log_probs: &[Vec<f64>],
    cfg: &ObjectiveConfig,
    objective: &dyn PreferenceObjective,
) -> Result<(f64, Vec<Vec<f64>>, BatchStats), ObjectiveError> {
    assert_eq!(log_probs.len(), 2 * batch.len());
    let total_w: f64 = batch.iter().map(|p| p.class_weight).sum();
    let mut value = 0.0;
    let mut coefs = Vec::with_capacity(log_probs.len());
    let mut stats = BatchStats::default();
    let (mut gated, mut chosen_tokens) = (0usize, 0usize);
    for (i, pair) in batch.iter().enumerate() {
        let (lp_c, lp_r) = (&log_probs[2 * i], &log_probs[2 * i + 1]);
        let (lc, dc) = weighted_loglik_from(lp_c, &pair.w_chosen, cfg.length_norm)?;
        let (lr, dr) = weighted_loglik_from(lp_r, &pair.w_rejected, cfg.length_norm)?;
        let agg = PairAggregates {
            policy_chosen: lc,
            policy_rejected: lr,
            ref_chosen: pair.ref_chosen,
            ref_rejected: pair.ref_rejected,
        };
        let (pref, d_chosen, d_rejected) = objective.loss(&agg, cfg.beta);
        let gate = gate_from_log_probs(lp_c, cfg.tau);
        let (barrier, db) = if cfg.lambda_sft > 0.0 {
            barrier_from_log_probs(lp_c, &pair.w_chosen, &gate)
        } else {
            (0.0, vec![0.0; lp_c.len()])
        };
        let scale = pair.class_weight / total_w;
        value += scale * (pref + cfg.lambda_sft * barrier);
        coefs.push(
            dc.iter()
                .zip(&db)
                .map(|(a, b)| scale * (d_chosen * a + cfg.lambda_sft * b))
                .collect(),
        );
        coefs.push(dr.iter().map(|a| scale * d_rejected * a).collect());

        stats.preference_loss += pref;
        stats.barrier_loss += barrier;
        stats.mean_delta += agg.delta();
        stats.mean_chosen_loglik += lp_c.iter().sum::<f64>();
        stats.mean_rejected_loglik += lp_r.iter().sum::<f64>();
        stats.mean_ref_chosen_loglik += pair.ref_chosen_loglik;
        gated += gate.iter().filter(|&&g| g).count();
        chosen_tokens += gate.len();
    }
    let n = batch.len().max(1) as f64;
    stats.preference_loss /= n;
    stats.barrier_loss /= n;
    stats.mean_delta /= n;
    stats.mean_chosen_loglik /= n;
    stats.mean_rejected_loglik /= n;
    stats.mean_ref_chosen_loglik /= n;
    stats.barrier_activation = if chosen_tokens > 0 {
        gated as f64 / chosen_tokens as f64
    } else {
        0.0
    };
    Ok((value, coefs, stats))
}

fn pair_sequences(batch: &[PreparedPair]) -> Vec<Sequence<'_>> {
    batch
        .iter()
        .flat_map(|p| [Sequence::from(&p.chosen), Sequence::from(&p.rejected)])
        .collect()
}

/// Class-balanced objective over a prepared batch with its gradient.
pub fn tabpo_batch_loss_and_grad(
    policy: &Policy,
    batch: &[PreparedPair],
    cfg: &ObjectiveConfig,
    objective: &dyn PreferenceObjective,
    mode: ExecMode,
) -> Result<(f64, Vec<f64>, BatchStats), ObjectiveError> {
    let seqs = pair_sequences(batch);
    let traces = policy.traces(&seqs, mode);
    let log_probs: Vec<Vec<f64>> = traces.iter().map(|t| t.log_probs.clone()).collect();
    let (value, coefs, stats) = tabpo_from_log_probs(batch, &log_probs, cfg, objective)?;
    if !value.is_finite() {
        return Err(PolicyError::NonFiniteLoss(value).into());
    }
    let grad = policy.gradient_from_traces(&seqs, &traces, &coefs, mode);
    Ok((value, grad, stats))
}

/// Objective value only.
pub fn tabpo_batch_loss(
    policy: &Policy,
    batch: &[PreparedPair],
    cfg: &ObjectiveConfig,
    objective: &dyn PreferenceObjective,
) -> Result<(f64, BatchStats), ObjectiveError> {
    let seqs = pair_sequences(batch);
    let log_probs: Vec<Vec<f64>> = seqs.iter().map(|s| policy.sequence_log_probs(*s)).collect();
    let (value, _, stats) = tabpo_from_log_probs(batch, &log_probs, cfg, objective)?;
    Ok((value, stats))
}

/// Single-triple objective `L^w_pref + λ · L_barrier`.
pub fn tabpo_loss(
    policy: &Policy,
    reference: &Policy,
    chosen: &TokenizedCompletion,
    rejected: &TokenizedCompletion,
    cfg: &ObjectiveConfig,
    wcfg: &WeightConfig,
) -> Result<f64, ObjectiveError> {
    cfg.validate()?;
    let pair = prepare_pair(reference, chosen.clone(), rejected.clone(), cfg, wcfg, 1.0)?;
    Ok(tabpo_batch_loss(policy, std::slice::from_ref(&pair), cfg, &LogisticPreference)?.0)
}
