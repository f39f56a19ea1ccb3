//! Micro precision/recall/F1 at the code, sub-code and relaxed-span levels,
//! plus top-k confusion tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::confusion::{extract_confusion_model, span_tokens, jaccard_sets, MatchMode, DEFAULT_MATCH_THRESHOLD};
use crate::parallel::{map_slice, ExecMode};
use crate::schema::{parse_output, Codebook, LabelSet};
use crate::synth::leaf_key;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelCounting {
    /// Per-example bag intersection; repeated labels count repeatedly.
    #[default]
    Multiset,
    /// Per-example set intersection.
    Set,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub label_counting: LabelCounting,
    pub jaccard_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            label_counting: LabelCounting::Multiset,
            jaccard_threshold: DEFAULT_MATCH_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl LevelMetrics {
    pub fn from_counts(c: Counts) -> Self {
        let ratio = |a: usize, b: usize| if b > 0 { a as f64 / b as f64 } else { 0.0 };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        LevelMetrics {
            precision,
            recall,
            f1,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub label_counting: LabelCounting,
    pub span_matching: String,
    pub jaccard_threshold: f64,
    pub containment_either_direction: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub header: ReportHeader,
    pub code: LevelMetrics,
    pub subcode: LevelMetrics,
    pub span: LevelMetrics,
    pub parse_failure_count: usize,
    pub n_examples: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn label_counts<'a>(labels: impl Iterator<Item = &'a str>, counting: LabelCounting) -> BTreeMap<&'a str, usize> {
    let mut m = BTreeMap::new();
    for l in labels {
        let e = m.entry(l).or_insert(0);
        *e = match counting {
            LabelCounting::Multiset => *e + 1,
            LabelCounting::Set => 1,
        };
    }
    m
}

/// TP/FP/FN for one example's label collections.
pub fn label_level_counts<'a>(
    gold: impl Iterator<Item = &'a str>,
    pred: impl Iterator<Item = &'a str>,
    counting: LabelCounting,
) -> Counts {
    let g = label_counts(gold, counting);
    let p = label_counts(pred, counting);
    let tp: usize = g.iter().map(|(k, &c)| c.min(p.get(k).copied().unwrap_or(0))).sum();
    Counts {
        tp,
        fp: p.values().sum::<usize>() - tp,
        fn_: g.values().sum::<usize>() - tp,
    }
}

/// Relaxed span match: token-set containment either way, or J ≥ threshold.
pub fn spans_match(gold: &BTreeSet<String>, pred: &BTreeSet<String>, threshold: f64) -> bool {
    gold.is_subset(pred) || pred.is_subset(gold) || jaccard_sets(gold, pred) >= threshold
}

/// Maximum-cardinality one-to-one matching between gold and predicted spans
/// under the relaxed rule (augmenting paths).
pub fn max_span_matching(gold: &[String], pred: &[String], threshold: f64) -> usize {
    let gt: Vec<_> = gold.iter().map(|s| span_tokens(s)).collect();
    let pt: Vec<_> = pred.iter().map(|s| span_tokens(s)).collect();
    let adj: Vec<Vec<usize>> = gt
        .iter()
        .map(|g| (0..pt.len()).filter(|&j| spans_match(g, &pt[j], threshold)).collect())
        .collect();
    fn augment(i: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &j in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|k| augment(k, adj, seen, owner)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; pt.len()];
    let mut size = 0;
    for i in 0..gt.len() {
        let mut seen = vec![false; pt.len()];
        if augment(i, &adj, &mut seen, &mut owner) {
            size += 1;
        }
    }
    size
}

#[derive(Debug, Clone, Copy, Default)]
struct ExampleCounts {
    code: Counts,
    subcode: Counts,
    span: Counts,
}

fn score_example(gold: &LabelSet, pred: &LabelSet, opts: &EvalOptions) -> ExampleCounts {
    let gt = gold.tuples();
    let pt = pred.tuples();
    let code = label_level_counts(
        gt.iter().map(|t| t.code.as_str()),
        pt.iter().map(|t| t.code.as_str()),
        opts.label_counting,
    );
    let subcode = label_level_counts(
        gt.iter().map(|t| t.subcode.as_str()),
        pt.iter().map(|t| t.subcode.as_str()),
        opts.label_counting,
    );
    let gs: Vec<String> = gt.iter().map(|t| t.span.clone()).collect();
    let ps: Vec<String> = pt.iter().map(|t| t.span.clone()).collect();
    let tp = max_span_matching(&gs, &ps, opts.jaccard_threshold);
    ExampleCounts {
        code,
        subcode,
        span: Counts {
            tp,
            fp: ps.len() - tp,
            fn_: gs.len() - tp,
        },
    }
}

/// Scores already-parsed predictions; `None` marks a parse failure.
pub fn evaluate_parsed(pairs: &[(LabelSet, Option<LabelSet>)], opts: &EvalOptions, mode: ExecMode) -> MetricsReport {
    let empty = LabelSet::empty();
    let per = map_slice(mode, pairs, |(g, p)| score_example(g, p.as_ref().unwrap_or(&empty), opts));
    let mut total = ExampleCounts::default();
    for c in per {
        total.code.add(c.code);
        total.subcode.add(c.subcode);
        total.span.add(c.span);
    }
    MetricsReport {
        header: ReportHeader {
            label_counting: opts.label_counting,
            span_matching: "maximum_one_to_one".into(),
            jaccard_threshold: opts.jaccard_threshold,
            containment_either_direction: true,
        },
        code: LevelMetrics::from_counts(total.code),
        subcode: LevelMetrics::from_counts(total.subcode),
        span: LevelMetrics::from_counts(total.span),
        parse_failure_count: pairs.iter().filter(|(_, p)| p.is_none()).count(),
        n_examples: pairs.len(),
    }
}

pub fn parse_predictions(pairs: &[(LabelSet, String)], codebook: &Codebook) -> Vec<(LabelSet, Option<LabelSet>)> {
    pairs
        .iter()
        .map(|(g, text)| (g.clone(), parse_output(text, codebook).ok()))
        .collect()
}

/// Scores raw predicted text against gold; unparseable outputs count as
/// empty predictions.
pub fn evaluate_predictions(pairs: &[(LabelSet, String)], codebook: &Codebook, opts: &EvalOptions) -> MetricsReport {
    evaluate_parsed(&parse_predictions(pairs, codebook), opts, ExecMode::default())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionRow {
    pub level: String,
    pub gold: String,
    pub pred: String,
    pub count: usize,
}

fn top_rows(level: &str, table: &BTreeMap<String, BTreeMap<String, usize>>, k: usize) -> Vec<ConfusionRow> {
    let mut rows: Vec<ConfusionRow> = table
        .iter()
        .flat_map(|(g, r)| {
            r.iter().map(move |(p, &c)| ConfusionRow {
                level: level.to_string(),
                gold: g.clone(),
                pred: p.clone(),
                count: c,
            })
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.gold.cmp(&b.gold)).then_with(|| a.pred.cmp(&b.pred)));
    rows.truncate(k);
    rows
}

/// The `k` most frequent mismatches per level over matched spans.
pub fn confusion_report(pairs: &[(LabelSet, Option<LabelSet>)], k: usize) -> Vec<ConfusionRow> {
    let k = k.max(1);
    let cm = extract_confusion_model(pairs, DEFAULT_MATCH_THRESHOLD, MatchMode::OneToOne, ExecMode::default());
    let mut rows = top_rows("code", &cm.code_counts, k);
    rows.extend(top_rows("subcode", &cm.sub_counts, k));
    rows
}

/// Gold leaf → predicted leaf mismatch counts over matched spans.
pub fn leaf_confusion_counts(pairs: &[(LabelSet, Option<LabelSet>)]) -> BTreeMap<(String, String), usize> {
    let mut out = BTreeMap::new();
    for (gold, pred) in pairs {
        let Some(pred) = pred else { continue };
        for (i, j) in crate::confusion::match_spans(gold, pred, DEFAULT_MATCH_THRESHOLD) {
            let (g, p) = (&gold.tuples()[i], &pred.tuples()[j]);
            let (a, b) = (leaf_key(&g.code, &g.subcode), leaf_key(&p.code, &p.subcode));
            if a != b {
                *out.entry((a, b)).or_insert(0) += 1;
            }
        }
    }
    out
}

pub fn confusion_csv(rows: &[ConfusionRow]) -> String {
    let mut out = String::from("level,gold,pred,count\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.level, csv_field(&r.gold), csv_field(&r.pred), r.count));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_report(path: &Path, report: &MetricsReport) -> std::io::Result<()> {
    fs::write(path, report.to_json())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{canonical_serialize, AnnotationTuple};

    fn ls(items: &[(&str, &str, &str)]) -> LabelSet {
        LabelSet::new(items.iter().map(|(c, s, p)| AnnotationTuple::new(*c, *s, *p)).collect()).unwrap()
    }

    fn cb() -> Codebook {
        let mut h = BTreeMap::new();
        for c in ["A", "B", "C"] {
            h.insert(c.to_string(), vec!["x".to_string(), "y".to_string()]);
        }
        Codebook::new(vec!["A".into(), "B".into(), "C".into()], vec!["x".into(), "y".into()], h).unwrap()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let g = ls(&[("A", "x", "one two"), ("B", "y", "three")]);
        let r = evaluate_predictions(&[(g.clone(), canonical_serialize(&g))], &cb(), &EvalOptions::default());
        for m in [r.code, r.subcode, r.span] {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn half_overlap_codes() {
        let g = ls(&[("A", "x", "p"), ("C", "x", "q")]);
        let p = ls(&[("A", "x", "p"), ("B", "x", "q")]);
        let r = evaluate_predictions(&[(g, canonical_serialize(&p))], &cb(), &EvalOptions::default());
        assert_eq!((r.code.tp, r.code.fp, r.code.fn_), (1, 1, 1));
        assert_eq!(r.code.f1, 0.5);
    }

    #[test]
    fn containment_matches_both_ways() {
        let g = ls(&[("A", "x", "a b c d e")]);
        let p = ls(&[("A", "x", "b c")]);
        assert!(jaccard_sets(&span_tokens("a b c d e"), &span_tokens("b c")) < 0.6);
        let o = EvalOptions::default();
        let r = evaluate_predictions(&[(g.clone(), canonical_serialize(&p))], &cb(), &o);
        assert_eq!(r.span.tp, 1);
        let r = evaluate_predictions(&[(p, canonical_serialize(&g))], &cb(), &o);
        assert_eq!(r.span.tp, 1);
    }

    #[test]
    fn unparseable_counts_as_empty() {
        let g = ls(&[("A", "x", "p")]);
        let r = evaluate_predictions(&[(g, "not json".into())], &cb(), &EvalOptions::default());
        assert_eq!(r.parse_failure_count, 1);
        assert_eq!((r.code.tp, r.code.fn_), (0, 1));
        assert_eq!(r.code.f1, 0.0);
    }

    #[test]
    fn bag_and_set_counting_differ_on_repeats() {
        let g = ls(&[("A", "x", "p")]);
        let p = ls(&[("A", "x", "p"), ("A", "x", "q")]);
        let bag = evaluate_parsed(&[(g.clone(), Some(p.clone()))], &EvalOptions::default(), ExecMode::Sequential);
        assert_eq!(bag.code.fp, 1);
        let set = EvalOptions {
            label_counting: LabelCounting::Set,
            ..EvalOptions::default()
        };
        let s = evaluate_parsed(&[(g, Some(p))], &set, ExecMode::Sequential);
        assert_eq!(s.code.fp, 0);
    }

    #[test]
    fn matching_is_maximal() {
        // Greedy on gold order would take (0,0) and leave gold 1 unmatched.
        let gold = vec!["a b".to_string(), "a".to_string()];
        let pred = vec!["a".to_string(), "a b c d e f".to_string()];
        assert_eq!(max_span_matching(&gold, &pred, 0.6), 2);
    }

    #[test]
    fn confusion_table() {
        let g = ls(&[("A", "x", "p q")]);
        let p = ls(&[("B", "x", "p q")]);
        let pairs: Vec<_> = (0..5).map(|_| (g.clone(), Some(p.clone()))).collect();
        let rows = confusion_report(&pairs, 5);
        assert_eq!(
            rows,
            vec![ConfusionRow {
                level: "code".into(),
                gold: "A".into(),
                pred: "B".into(),
                count: 5
            }]
        );
        assert!(confusion_report(&[(g.clone(), Some(g))], 5).is_empty());
        assert!(confusion_csv(&rows).starts_with("level,gold,pred,count\ncode,A,B,5"));
    }
}
