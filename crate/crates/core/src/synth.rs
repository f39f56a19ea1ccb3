//! Synthetic hierarchical annotation benchmark: a codebook, a long-tailed
//! label distribution, confusable label pairs sharing phrase stems, grounded
//! spans, and multi-label iterative stratification.
//!
//! Messages list their phrases in codebook leaf order, and gold tuples follow
//! message order. The same power law is applied at the code level and, within
//! each code, at the sub-code level.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{AnnotationTuple, Codebook, Direction, Example, LabelSet, NONE_SUBCODE};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid task spec: {0}")]
    SpecError(String),
    #[error("split error: {0}")]
    SplitError(String),
    #[error("corpus file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A (code, sub-code) leaf written as `Code/Sub-code`.
pub fn leaf_key(code: &str, subcode: &str) -> String {
    format!("{code}/{subcode}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub n_codes: usize,
    pub n_subcodes: usize,
    /// Pairs of leaf keys whose phrases share a stem.
    pub confusable_pairs: Vec<(String, String)>,
    pub frequency_exponent: f64,
    pub n_examples: usize,
    pub min_phrases: usize,
    pub max_phrases: usize,
    /// Leaf key → phrases; leaves left out get generated phrases.
    pub phrase_bank: BTreeMap<String, Vec<String>>,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            n_codes: 8,
            n_subcodes: 26,
            confusable_pairs: DEFAULT_CONFUSABLE
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            frequency_exponent: 0.5,
            n_examples: 2500,
            min_phrases: 1,
            max_phrases: 5,
            phrase_bank: BTreeMap::new(),
            seed: 7,
        }
    }
}

const DEFAULT_CODES: [(&str, &[&str]); 8] = [
    ("PartnerProv", &["greeting", "gratitude", "signoff", "apology"]),
    ("PartnerPat", &["thanks", "worry", "praise", "request"]),
    ("InfoGive", &["results", "medication", "scheduling", "instructions"]),
    ("InfoSeek", &["symptoms", "questions", "refill", "billing"]),
    ("Emotion", &["fear", "relief", "frustration"]),
    ("SDOH", &["housing", "transport", "food", "finance", "employment", "insurance"]),
    ("Logistics", &[]),
    ("Other", &[]),
];

const DEFAULT_CONFUSABLE: [(&str, &str); 5] = [
    ("PartnerProv/gratitude", "PartnerPat/thanks"),
    ("InfoGive/medication", "InfoSeek/refill"),
    ("InfoGive/results", "InfoSeek/symptoms"),
    ("PartnerPat/worry", "Emotion/fear"),
    ("SDOH/transport", "Logistics/None"),
];

const WORDS: &[&str] = &[
    "please", "call", "back", "when", "you", "can", "thank", "so", "much", "for", "the", "help", "we", "will",
    "send", "your", "lab", "report", "today", "i", "am", "worried", "about", "my", "pain", "need", "a", "new",
    "ride", "to", "clinic", "bus", "pass", "rent", "due", "soon", "lost", "job", "last", "week", "food",
    "bank", "near", "home", "pills", "ran", "out", "dose", "was", "changed", "scan", "looked", "normal",
    "blood", "sugar", "high", "cough", "got", "worse", "fever", "came", "sorry", "delay", "hope", "well",
    "best", "wishes", "take", "care", "great", "news", "feel", "better", "scared", "surgery", "relieved",
    "hear", "that", "fed", "up", "waiting", "bill", "seems", "wrong", "insurance", "denied", "claim",
    "visit", "moved", "monday", "follow", "these", "steps", "eat", "before", "test", "kind", "staff",
    "nurse", "doctor", "question", "side", "effect", "rash", "appt", "form", "portal", "message", "shelter",
    "paycheck", "late", "coverage", "ended", "copay", "office", "hours", "note", "refill", "pharmacy",
    "kept", "night", "appreciate", "reply", "hello", "there", "good", "morning", "keep", "safe", "fixed",
    "helped", "again", "walker", "order", "weather", "sunny", "dog", "garden", "parking", "lot", "full",
    "elevator", "broken", "closed", "holiday", "cheers", "thanks", "sleep", "trouble", "breath", "short",
];

fn default_codebook_parts(n_codes: usize, n_subcodes: usize) -> Vec<(String, Vec<String>)> {
    if n_codes == DEFAULT_CODES.len() && n_subcodes == 26 {
        return DEFAULT_CODES
            .iter()
            .map(|(c, subs)| (c.to_string(), subs.iter().map(|s| s.to_string()).collect()))
            .collect();
    }
    let named = n_subcodes.saturating_sub(1);
    let mut parts: Vec<(String, Vec<String>)> = (0..n_codes).map(|i| (format!("C{i}"), Vec::new())).collect();
    for s in 0..named {
        parts[s % n_codes].1.push(format!("s{s}"));
    }
    parts
}

/// Codebook for the spec's inventory sizes. Codes without named sub-codes map
/// to the shared `None` sub-code.
pub fn build_codebook(spec: &TaskSpec) -> Result<Codebook, SynthError> {
    if spec.n_codes == 0 {
        return Err(SynthError::SpecError("n_codes must be at least 1".into()));
    }
    if spec.n_subcodes < 1 {
        return Err(SynthError::SpecError("n_subcodes must be at least 1 (the None sub-code)".into()));
    }
    let parts = default_codebook_parts(spec.n_codes, spec.n_subcodes);
    let mut subcodes: Vec<String> = parts.iter().flat_map(|(_, s)| s.clone()).collect();
    subcodes.push(NONE_SUBCODE.to_string());
    let hierarchy = parts
        .iter()
        .map(|(c, s)| {
            let subs = if s.is_empty() { vec![NONE_SUBCODE.to_string()] } else { s.clone() };
            (c.clone(), subs)
        })
        .collect();
    let codes = parts.into_iter().map(|(c, _)| c).collect();
    Codebook::new(codes, subcodes, hierarchy).map_err(|e| SynthError::SpecError(e.to_string()))
}

/// Phrase bank covering every leaf: user phrases are kept, the
/// rest are built as a three-word stem plus one keyword. Confusable partners
/// share their stem.
pub fn resolve_phrase_bank(spec: &TaskSpec, codebook: &Codebook) -> BTreeMap<String, Vec<String>> {
    let leaves: Vec<String> = codebook.leaves().iter().map(|(c, s)| leaf_key(c, s)).collect();
    let mut words = WORDS.iter().map(|w| w.to_string()).collect::<Vec<_>>().into_iter();
    let mut extra = 0usize;
    let mut next_word = move || {
        words.next().unwrap_or_else(|| {
            extra += 1;
            format!("w{extra}q")
        })
    };
    let mut stems: BTreeMap<String, String> = BTreeMap::new();
    let mut bank = BTreeMap::new();
    for leaf in &leaves {
        if let Some(p) = spec.phrase_bank.get(leaf) {
            bank.insert(leaf.clone(), p.clone());
            continue;
        }
        let partner = spec.confusable_pairs.iter().find_map(|(a, b)| {
            if a == leaf {
                Some(b)
            } else if b == leaf {
                Some(a)
            } else {
                None
            }
        });
        let stem = match partner.and_then(|p| stems.get(p)) {
            Some(s) => s.clone(),
            None => format!("{} {} {}", next_word(), next_word(), next_word()),
        };
        stems.insert(leaf.clone(), stem.clone());
        let phrases = (0..2).map(|_| format!("{stem} {}", next_word())).collect();
        bank.insert(leaf.clone(), phrases);
    }
    bank
}

fn shares_stem(a: &[String], b: &[String]) -> bool {
    a.iter().any(|p| {
        let first = p.split_whitespace().next();
        b.iter().any(|q| first.is_some() && q.split_whitespace().next() == first)
    })
}

impl TaskSpec {
    pub fn validate(&self, codebook: &Codebook, bank: &BTreeMap<String, Vec<String>>) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::SpecError(m));
        if self.n_examples == 0 {
            return bad("n_examples must be at least 1".into());
        }
        if self.min_phrases == 0 || self.min_phrases > self.max_phrases {
            return bad("need 1 <= min_phrases <= max_phrases".into());
        }
        if !(self.frequency_exponent.is_finite() && self.frequency_exponent >= 0.0) {
            return bad("frequency_exponent must be finite and non-negative".into());
        }
        let leaves: BTreeSet<String> = codebook.leaves().iter().map(|(c, s)| leaf_key(c, s)).collect();
        if let Some(k) = self.phrase_bank.keys().find(|k| !leaves.contains(*k)) {
            return bad(format!("phrase bank key `{k}` is not a codebook leaf"));
        }
        for leaf in &leaves {
            let phrases = bank.get(leaf).map(Vec::as_slice).unwrap_or(&[]);
            if phrases.len() < 2 {
                return bad(format!("leaf `{leaf}` needs at least 2 phrases"));
            }
            if phrases.iter().any(|p| p.trim().is_empty()) {
                return bad(format!("leaf `{leaf}` has an empty phrase"));
            }
        }
        for (a, b) in &self.confusable_pairs {
            if !leaves.contains(a) || !leaves.contains(b) || a == b {
                return bad(format!("confusable pair ({a}, {b}) must name two distinct leaves"));
            }
            if !shares_stem(&bank[a], &bank[b]) {
                return bad(format!("confusable pair ({a}, {b}) shares no phrase stem"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub code_frequencies: BTreeMap<String, usize>,
    pub subcode_frequencies: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_examples: usize,
    pub n_tuples: usize,
    pub code_frequencies: BTreeMap<String, usize>,
    pub subcode_frequencies: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn from_examples(examples: Vec<Example>) -> Self {
        let mut code_frequencies = BTreeMap::new();
        let mut subcode_frequencies = BTreeMap::new();
        for ex in &examples {
            for t in ex.gold.tuples() {
                *code_frequencies.entry(t.code.clone()).or_insert(0) += 1;
                *subcode_frequencies.entry(t.subcode.clone()).or_insert(0) += 1;
            }
        }
        Corpus {
            examples,
            code_frequencies,
            subcode_frequencies,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats {
            n_examples: self.examples.len(),
            n_tuples: self.examples.iter().map(|e| e.gold.len()).sum(),
            code_frequencies: self.code_frequencies.clone(),
            subcode_frequencies: self.subcode_frequencies.clone(),
        }
    }

    /// One JSON example per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex).expect("example serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), SynthError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, SynthError> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut examples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: Example = serde_json::from_str(&line).map_err(|e| SynthError::Format {
                line: i + 1,
                message: e.to_string(),
            })?;
            examples.push(ex);
        }
        Ok(Corpus::from_examples(examples))
    }
}

fn power_weight(rank: usize, exponent: f64) -> f64 {
    ((rank + 1) as f64).powf(-exponent)
}

/// Deterministic corpus generation from `spec.seed`.
pub fn generate_corpus(spec: &TaskSpec) -> Result<(Codebook, Corpus), SynthError> {
    let codebook = build_codebook(spec)?;
    let bank = resolve_phrase_bank(spec, &codebook);
    spec.validate(&codebook, &bank)?;

    let mut leaves: Vec<(String, String, f64)> = Vec::new();
    for (ci, code) in codebook.codes().iter().enumerate() {
        for (si, sub) in codebook.valid_subcodes(code).iter().enumerate() {
            let w = power_weight(ci, spec.frequency_exponent) * power_weight(si, spec.frequency_exponent);
            leaves.push((code.clone(), sub.clone(), w));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut examples = Vec::with_capacity(spec.n_examples);
    for i in 0..spec.n_examples {
        let k = rng.gen_range(spec.min_phrases..=spec.max_phrases).min(leaves.len());
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        while chosen.len() < k {
            let total: f64 = leaves
                .iter()
                .enumerate()
                .filter(|(j, _)| !chosen.contains(j))
                .map(|(_, l)| l.2)
                .sum();
            let mut r = rng.gen::<f64>() * total;
            let mut pick = None;
            for (j, l) in leaves.iter().enumerate() {
                if chosen.contains(&j) {
                    continue;
                }
                pick = Some(j);
                r -= l.2;
                if r < 0.0 {
                    break;
                }
            }
            chosen.push(pick.expect("at least one leaf remains"));
        }
        chosen.sort_unstable();
        let mut tuples = Vec::with_capacity(k);
        let mut phrases = Vec::with_capacity(k);
        for &j in &chosen {
            let (code, sub, _) = &leaves[j];
            let options = &bank[&leaf_key(code, sub)];
            let phrase = options[rng.gen_range(0..options.len())].clone();
            tuples.push(AnnotationTuple::new(code.clone(), sub.clone(), phrase.clone()));
            phrases.push(phrase);
        }
        let direction = if rng.gen_bool(0.5) { Direction::Y } else { Direction::N };
        let (gold, _) = LabelSet::dedup_from(tuples);
        examples.push(Example {
            id: format!("ex{i:05}"),
            message: format!("{}.", phrases.join(". ")),
            direction,
            gold,
        });
    }
    Ok((codebook, Corpus::from_examples(examples)))
}

/// Stratification labels of an example: its distinct leaves.
fn example_labels(ex: &Example) -> BTreeSet<String> {
    ex.gold.tuples().iter().map(|t| leaf_key(&t.code, &t.subcode)).collect()
}

fn argmax_by<F: Fn(usize) -> (f64, f64)>(candidates: &[usize], key: F) -> usize {
    let mut best = candidates[0];
    for &j in &candidates[1..] {
        let (a, b) = (key(j), key(best));
        if a.0 > b.0 || (a.0 == b.0 && a.1 > b.1) {
            best = j;
        }
    }
    best
}

/// Greedy iterative stratification into train/validation/test.
///
/// Examples are shuffled by `seed`, then repeatedly the label with the fewest
/// unassigned examples is selected and each of its examples goes to the split
/// with the largest remaining desired count for that label (ties: largest
/// remaining total, then lowest split index). A label seen at least 3 times is
/// first routed to positive-ratio splits that do not have it yet.
pub fn stratified_split(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<[Corpus; 3], SynthError> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SynthError::SplitError(format!("ratios {ratios:?} must be >= 0 and sum to 1")));
    }
    let n = corpus.examples.len();
    let labels: Vec<BTreeSet<String>> = corpus.examples.iter().map(example_labels).collect();
    let mut totals: BTreeMap<String, usize> = BTreeMap::new();
    for ls in &labels {
        for l in ls {
            *totals.entry(l.clone()).or_insert(0) += 1;
        }
    }
    let active: Vec<usize> = (0..3).filter(|&j| ratios[j] > 0.0).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut desired_total: [f64; 3] = [0.0; 3];
    for j in 0..3 {
        desired_total[j] = ratios[j] * n as f64;
    }
    let mut desired: BTreeMap<String, [f64; 3]> = totals
        .iter()
        .map(|(l, &c)| (l.clone(), [ratios[0] * c as f64, ratios[1] * c as f64, ratios[2] * c as f64]))
        .collect();
    let mut have: BTreeMap<String, [usize; 3]> = totals.keys().map(|l| (l.clone(), [0; 3])).collect();
    let mut remaining = totals.clone();
    let mut assignment: Vec<Option<usize>> = vec![None; n];

    let assign = |e: usize,
                      j: usize,
                      assignment: &mut Vec<Option<usize>>,
                      desired: &mut BTreeMap<String, [f64; 3]>,
                      have: &mut BTreeMap<String, [usize; 3]>,
                      remaining: &mut BTreeMap<String, usize>,
                      desired_total: &mut [f64; 3]| {
        assignment[e] = Some(j);
        desired_total[j] -= 1.0;
        for l in &labels[e] {
            desired.get_mut(l).expect("label")[j] -= 1.0;
            have.get_mut(l).expect("label")[j] += 1;
            *remaining.get_mut(l).expect("label") -= 1;
        }
    };

    loop {
        let next = remaining
            .iter()
            .filter(|(_, &c)| c > 0)
            .min_by(|a, b| a.1.cmp(b.1).then_with(|| a.0.cmp(b.0)))
            .map(|(l, _)| l.clone());
        let Some(label) = next else { break };
        let members: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&e| assignment[e].is_none() && labels[e].contains(&label))
            .collect();
        for e in members {
            let mut cands: Vec<usize> = active.clone();
            if totals[&label] >= 3 {
                let uncovered: Vec<usize> = active.iter().copied().filter(|&j| have[&label][j] == 0).collect();
                if !uncovered.is_empty() {
                    cands = uncovered;
                }
            }
            let d = desired[&label];
            let j = argmax_by(&cands, |j| (d[j], desired_total[j]));
            assign(e, j, &mut assignment, &mut desired, &mut have, &mut remaining, &mut desired_total);
        }
    }
    for &e in &order {
        if assignment[e].is_none() {
            let j = argmax_by(&active, |j| (desired_total[j], 0.0));
            assign(e, j, &mut assignment, &mut desired, &mut have, &mut remaining, &mut desired_total);
        }
    }
    for (l, &c) in &totals {
        if c >= 3 {
            if let Some(&j) = active.iter().find(|&&j| have[l][j] == 0) {
                return Err(SynthError::SplitError(format!("label `{l}` (count {c}) is missing from split {j}")));
            }
        }
    }
    let mut parts: [Vec<Example>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (e, ex) in corpus.examples.iter().enumerate() {
        parts[assignment[e].expect("every example assigned")].push(ex.clone());
    }
    let [a, b, c] = parts;
    Ok([Corpus::from_examples(a), Corpus::from_examples(b), Corpus::from_examples(c)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_examples_is_a_spec_error() {
        let spec = TaskSpec {
            n_examples: 0,
            ..TaskSpec::default()
        };
        assert!(matches!(generate_corpus(&spec), Err(SynthError::SpecError(_))));
    }

    #[test]
    fn thin_phrase_bank_is_a_spec_error() {
        let mut spec = TaskSpec::default();
        spec.phrase_bank.insert("Other/None".into(), vec!["only one".into()]);
        assert!(matches!(generate_corpus(&spec), Err(SynthError::SpecError(_))));
    }

    #[test]
    fn default_inventory_sizes() {
        let cb = build_codebook(&TaskSpec::default()).unwrap();
        assert_eq!(cb.codes().len(), 8);
        assert_eq!(cb.subcodes().len(), 26);
        let cb = build_codebook(&TaskSpec {
            n_codes: 3,
            n_subcodes: 5,
            ..TaskSpec::default()
        })
        .unwrap();
        assert_eq!(cb.codes().len(), 3);
        assert_eq!(cb.subcodes().len(), 5);
    }

    #[test]
    fn generation_is_deterministic_and_grounded() {
        let spec = TaskSpec {
            n_examples: 300,
            ..TaskSpec::default()
        };
        let (cb, a) = generate_corpus(&spec).unwrap();
        let (_, b) = generate_corpus(&spec).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        for ex in &a.examples {
            assert!((1..=5).contains(&ex.gold.len()));
            assert!(crate::schema::validate_label_set(&ex.gold, &cb, &ex.message).passed);
        }
        assert_eq!(Corpus::from_examples(a.examples.clone()), a);
    }

    #[test]
    fn confusable_pairs_share_stems() {
        let spec = TaskSpec::default();
        let cb = build_codebook(&spec).unwrap();
        let bank = resolve_phrase_bank(&spec, &cb);
        for (a, b) in &spec.confusable_pairs {
            assert!(shares_stem(&bank[a], &bank[b]));
        }
    }

    #[test]
    fn head_tail_ratio_is_long_tailed() {
        let (_, corpus) = generate_corpus(&TaskSpec::default()).unwrap();
        let counts: Vec<usize> = corpus.code_frequencies.values().copied().collect();
        assert_eq!(counts.len(), 8);
        let ratio = *counts.iter().max().unwrap() as f64 / *counts.iter().min().unwrap() as f64;
        assert!((4.0..=9.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn split_single_example_all_train() {
        let (_, corpus) = generate_corpus(&TaskSpec {
            n_examples: 1,
            ..TaskSpec::default()
        })
        .unwrap();
        let [tr, va, te] = stratified_split(&corpus, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (1, 0, 0));
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let (_, corpus) = generate_corpus(&TaskSpec {
            n_examples: 5,
            ..TaskSpec::default()
        })
        .unwrap();
        assert!(stratified_split(&corpus, [0.5, 0.2, 0.2], 1).is_err());
        assert!(stratified_split(&corpus, [1.2, -0.1, -0.1], 1).is_err());
    }

    #[test]
    fn split_partitions_and_covers() {
        let (_, corpus) = generate_corpus(&TaskSpec {
            n_examples: 400,
            ..TaskSpec::default()
        })
        .unwrap();
        let splits = stratified_split(&corpus, [0.8, 0.1, 0.1], 3).unwrap();
        let mut ids: Vec<String> = splits.iter().flat_map(|s| s.examples.iter().map(|e| e.id.clone())).collect();
        assert_eq!(ids.len(), corpus.len());
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), corpus.len());
        let mut totals: BTreeMap<String, usize> = BTreeMap::new();
        for ex in &corpus.examples {
            for l in example_labels(ex) {
                *totals.entry(l).or_insert(0) += 1;
            }
        }
        for (l, &c) in &totals {
            if c >= 3 {
                for s in &splits {
                    assert!(s.examples.iter().any(|e| example_labels(e).contains(l)), "{l}");
                }
            }
        }
        let again = stratified_split(&corpus, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(splits, again);
    }
}
