//! Annotation data model: codebook, tuples, label sets, the canonical JSON
//! output contract, the strict parser, and the byte-level tokenizer that
//! tracks which completion tokens belong to the Code, Sub-code and Span
//! values.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Sub-code value used by codes that carry no finer label.
pub const NONE_SUBCODE: &str = "None";

/// Number of byte tokens; the special tokens follow.
pub const BYTE_TOKENS: u32 = 256;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("malformed output: {0}")]
    MalformedOutput(String),
    #[error("invalid label: unknown {level} `{name}`")]
    InvalidLabel { level: &'static str, name: String },
    #[error("hierarchy violation: sub-code `{subcode}` is not valid for code `{code}`")]
    HierarchyViolation { code: String, subcode: String },
    #[error("field recovery failure: {0}")]
    FieldRecoveryFailure(String),
    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),
    #[error("duplicate tuple ({code}, {subcode}, {span:?})")]
    DuplicateTuple {
        code: String,
        subcode: String,
        span: String,
    },
    #[error("empty span")]
    EmptySpan,
}

#[derive(Debug, Deserialize)]
struct RawCodebook {
    codes: Vec<String>,
    subcodes: Vec<String>,
    hierarchy: BTreeMap<String, Vec<String>>,
}

/// Code and sub-code inventories plus the hierarchy map from each code to its
/// valid sub-codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawCodebook")]
pub struct Codebook {
    codes: Vec<String>,
    subcodes: Vec<String>,
    hierarchy: BTreeMap<String, Vec<String>>,
}

impl TryFrom<RawCodebook> for Codebook {
    type Error = SchemaError;

    fn try_from(raw: RawCodebook) -> Result<Self, Self::Error> {
        Codebook::new(raw.codes, raw.subcodes, raw.hierarchy)
    }
}

impl Codebook {
    pub fn new(
        codes: Vec<String>,
        subcodes: Vec<String>,
        hierarchy: BTreeMap<String, Vec<String>>,
    ) -> Result<Self, SchemaError> {
        let bad = |m: String| Err(SchemaError::InvalidCodebook(m));
        let code_set: BTreeSet<&String> = codes.iter().collect();
        if code_set.len() != codes.len() {
            return bad("duplicate code names".into());
        }
        let sub_set: BTreeSet<&String> = subcodes.iter().collect();
        if sub_set.len() != subcodes.len() {
            return bad("duplicate sub-code names".into());
        }
        if codes.is_empty() {
            return bad("no codes".into());
        }
        for code in &codes {
            match hierarchy.get(code) {
                None => return bad(format!("code `{code}` has no hierarchy entry")),
                Some(subs) if subs.is_empty() => {
                    return bad(format!("code `{code}` has an empty sub-code set"))
                }
                Some(subs) => {
                    for s in subs {
                        if !sub_set.contains(s) {
                            return bad(format!("sub-code `{s}` of `{code}` is not declared"));
                        }
                    }
                    let uniq: BTreeSet<&String> = subs.iter().collect();
                    if uniq.len() != subs.len() {
                        return bad(format!("code `{code}` lists a sub-code twice"));
                    }
                }
            }
        }
        if let Some(extra) = hierarchy.keys().find(|k| !code_set.contains(k)) {
            return bad(format!("hierarchy entry for undeclared code `{extra}`"));
        }
        Ok(Codebook {
            codes,
            subcodes,
            hierarchy,
        })
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn subcodes(&self) -> &[String] {
        &self.subcodes
    }

    pub fn valid_subcodes(&self, code: &str) -> &[String] {
        self.hierarchy.get(code).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn has_code(&self, code: &str) -> bool {
        self.hierarchy.contains_key(code)
    }

    pub fn has_subcode(&self, subcode: &str) -> bool {
        self.subcodes.iter().any(|s| s == subcode)
    }

    pub fn is_valid_pair(&self, code: &str, subcode: &str) -> bool {
        self.valid_subcodes(code).iter().any(|s| s == subcode)
    }

    /// Every valid (code, sub-code) pair in inventory order.
    pub fn leaves(&self) -> Vec<(String, String)> {
        self.codes
            .iter()
            .flat_map(|c| {
                self.valid_subcodes(c)
                    .iter()
                    .map(move |s| (c.clone(), s.clone()))
            })
            .collect()
    }

    /// Checks one (code, sub-code) pair, distinguishing unknown names from
    /// hierarchy breaches.
    pub fn check_pair(&self, code: &str, subcode: &str) -> Result<(), SchemaError> {
        if !self.has_code(code) {
            return Err(SchemaError::InvalidLabel {
                level: "code",
                name: code.to_string(),
            });
        }
        if !self.has_subcode(subcode) {
            return Err(SchemaError::InvalidLabel {
                level: "sub-code",
                name: subcode.to_string(),
            });
        }
        if !self.is_valid_pair(code, subcode) {
            return Err(SchemaError::HierarchyViolation {
                code: code.to_string(),
                subcode: subcode.to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AnnotationTuple {
    #[serde(rename = "Code")]
    pub code: String,
    #[serde(rename = "Sub-code")]
    pub subcode: String,
    #[serde(rename = "Span")]
    pub span: String,
}

impl AnnotationTuple {
    pub fn new(code: impl Into<String>, subcode: impl Into<String>, span: impl Into<String>) -> Self {
        AnnotationTuple {
            code: code.into(),
            subcode: subcode.into(),
            span: span.into(),
        }
    }
}

/// Ordered, duplicate-free collection of annotation tuples for one message.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct LabelSet {
    tuples: Vec<AnnotationTuple>,
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tuples = Vec::<AnnotationTuple>::deserialize(d)?;
        LabelSet::new(tuples).map_err(serde::de::Error::custom)
    }
}

impl LabelSet {
    pub fn new(tuples: Vec<AnnotationTuple>) -> Result<Self, SchemaError> {
        let mut seen = HashSet::new();
        for t in &tuples {
            if t.span.is_empty() {
                return Err(SchemaError::EmptySpan);
            }
            if !seen.insert(t) {
                return Err(SchemaError::DuplicateTuple {
                    code: t.code.clone(),
                    subcode: t.subcode.clone(),
                    span: t.span.clone(),
                });
            }
        }
        Ok(LabelSet { tuples })
    }

    /// Builds a label set keeping the first occurrence of each tuple; returns
    /// the number of duplicates dropped.
    pub fn dedup_from(tuples: Vec<AnnotationTuple>) -> (Self, usize) {
        let mut seen = HashSet::new();
        let before = tuples.len();
        let kept: Vec<_> = tuples.into_iter().filter(|t| seen.insert(t.clone())).collect();
        let dropped = before - kept.len();
        (LabelSet { tuples: kept }, dropped)
    }

    pub fn empty() -> Self {
        LabelSet::default()
    }

    pub fn tuples(&self) -> &[AnnotationTuple] {
        &self.tuples
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn contains(&self, t: &AnnotationTuple) -> bool {
        self.tuples.contains(t)
    }

    pub fn into_tuples(self) -> Vec<AnnotationTuple> {
        self.tuples
    }

    /// True when every tuple of `self` is in `other` and `other` is larger.
    pub fn is_strict_subset_of(&self, other: &LabelSet) -> bool {
        self.len() < other.len() && self.tuples.iter().all(|t| other.contains(t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Provider to patient.
    Y,
    /// Patient to provider.
    N,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Y => f.write_str("Y"),
            Direction::N => f.write_str("N"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub message: String,
    pub direction: Direction,
    pub gold: LabelSet,
}

/// The instruction text the policy conditions on for one example.
pub fn build_prompt(message: &str, direction: Direction) -> String {
    format!("annotate\ndirection: {direction}\nmessage: {message}")
}

impl Example {
    pub fn prompt(&self) -> String {
        build_prompt(&self.message, self.direction)
    }
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

/// Canonical output text: `{"results": [{"Code": …, "Sub-code": …, "Span": …}, …]}`.
pub fn canonical_serialize(labels: &LabelSet) -> String {
    let items: Vec<String> = labels
        .tuples
        .iter()
        .map(|t| {
            format!(
                "{{\"Code\": {}, \"Sub-code\": {}, \"Span\": {}}}",
                json_str(&t.code),
                json_str(&t.subcode),
                json_str(&t.span)
            )
        })
        .collect();
    format!("{{\"results\": [{}]}}", items.join(", "))
}

/// Parses model output under the strict contract, returning validated tuples
/// in array order, duplicates included.
pub fn parse_output_tuples(text: &str, codebook: &Codebook) -> Result<Vec<AnnotationTuple>, SchemaError> {
    let malformed = |m: &str| SchemaError::MalformedOutput(m.to_string());
    let value: Value =
        serde_json::from_str(text.trim()).map_err(|e| SchemaError::MalformedOutput(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| malformed("top level is not an object"))?;
    if obj.len() != 1 {
        return Err(malformed("top-level object must contain only \"results\""));
    }
    let results = obj
        .get("results")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing \"results\" array"))?;
    let mut out = Vec::with_capacity(results.len());
    for item in results {
        let fields = item.as_object().ok_or_else(|| malformed("result entry is not an object"))?;
        if fields.len() != 3 {
            return Err(malformed("result entry must have exactly Code, Sub-code, Span"));
        }
        let get = |k: &str| {
            fields
                .get(k)
                .and_then(Value::as_str)
                .ok_or_else(|| SchemaError::MalformedOutput(format!("missing string field {k:?}")))
        };
        let (code, subcode, span) = (get("Code")?, get("Sub-code")?, get("Span")?);
        if span.is_empty() {
            return Err(malformed("empty Span"));
        }
        codebook.check_pair(code, subcode)?;
        out.push(AnnotationTuple::new(code, subcode, span));
    }
    Ok(out)
}

/// Result of a successful parse with the duplicate-collapse count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub labels: LabelSet,
    pub duplicates_collapsed: usize,
}

pub fn parse_output_detailed(text: &str, codebook: &Codebook) -> Result<ParsedOutput, SchemaError> {
    let tuples = parse_output_tuples(text, codebook)?;
    let (labels, duplicates_collapsed) = LabelSet::dedup_from(tuples);
    Ok(ParsedOutput {
        labels,
        duplicates_collapsed,
    })
}

/// Strict parse; duplicate tuples collapse to their first occurrence.
pub fn parse_output(text: &str, codebook: &Codebook) -> Result<LabelSet, SchemaError> {
    parse_output_detailed(text, codebook).map(|p| p.labels)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TupleCheck {
    pub hierarchy_valid: bool,
    pub grounded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub tuples: Vec<TupleCheck>,
    pub duplicates: usize,
    pub passed: bool,
}

/// Per-tuple hierarchy membership and span grounding against `message`.
pub fn validate_tuples(tuples: &[AnnotationTuple], codebook: &Codebook, message: &str) -> ValidationReport {
    let checks: Vec<TupleCheck> = tuples
        .iter()
        .map(|t| TupleCheck {
            hierarchy_valid: codebook.is_valid_pair(&t.code, &t.subcode),
            grounded: !t.span.is_empty() && message.contains(t.span.as_str()),
        })
        .collect();
    let mut seen = HashSet::new();
    let duplicates = tuples.iter().filter(|t| !seen.insert(*t)).count();
    let passed = checks.iter().all(|c| c.hierarchy_valid && c.grounded);
    ValidationReport {
        tuples: checks,
        duplicates,
        passed,
    }
}

pub fn validate_label_set(labels: &LabelSet, codebook: &Codebook, message: &str) -> ValidationReport {
    validate_tuples(labels.tuples(), codebook, message)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldKind {
    Code,
    SubCode,
    Span,
}

/// Token ids of `prompt ∥ "\n" ∥ completion` with the completion mask and
/// field index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedCompletion {
    pub tokens: Vec<u32>,
    /// Index of the first completion token; every later token is masked in.
    pub completion_start: usize,
    pub code_positions: Vec<usize>,
    pub subcode_positions: Vec<usize>,
    pub span_positions: Vec<usize>,
    /// Field indicator weights (1 inside a field value, 0 elsewhere) until
    /// replaced by per-pair importance weights.
    pub weights: Vec<f64>,
}

impl TokenizedCompletion {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn completion_mask(&self) -> Vec<u8> {
        (0..self.tokens.len())
            .map(|i| u8::from(i >= self.completion_start))
            .collect()
    }

    pub fn prompt_tokens(&self) -> &[u32] {
        &self.tokens[..self.completion_start]
    }

    pub fn completion_tokens(&self) -> &[u32] {
        &self.tokens[self.completion_start..]
    }

    pub fn completion_len(&self) -> usize {
        self.tokens.len() - self.completion_start
    }

    /// Field membership of an absolute token position.
    pub fn field_of(&self, pos: usize) -> Option<FieldKind> {
        if self.code_positions.binary_search(&pos).is_ok() {
            Some(FieldKind::Code)
        } else if self.subcode_positions.binary_search(&pos).is_ok() {
            Some(FieldKind::SubCode)
        } else if self.span_positions.binary_search(&pos).is_ok() {
            Some(FieldKind::Span)
        } else {
            None
        }
    }

    /// Field membership per completion position.
    pub fn completion_fields(&self) -> Vec<Option<FieldKind>> {
        (self.completion_start..self.tokens.len())
            .map(|p| self.field_of(p))
            .collect()
    }
}

/// Byte-level tokenization of arbitrary text (no specials).
pub fn encode_text(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Inverse of [`encode_text`]; special tokens are dropped.
pub fn decode_tokens(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| t < BYTE_TOKENS)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Prompt side token ids: BOS, prompt bytes, separator newline.
pub fn encode_prompt(prompt: &str) -> Vec<u32> {
    let mut tokens = Vec::with_capacity(prompt.len() + 2);
    tokens.push(BOS);
    tokens.extend(prompt.bytes().map(u32::from));
    tokens.push(u32::from(b'\n'));
    tokens
}

/// Byte ranges (within `text`) of the quoted contents of every Code, Sub-code
/// and Span value.
fn recover_field_ranges(text: &[u8]) -> Result<Vec<(FieldKind, Range<usize>)>, SchemaError> {
    let fail = |m: String| Err(SchemaError::FieldRecoveryFailure(m));
    let mut out = Vec::new();
    let mut key: Option<Vec<u8>> = None;
    let mut i = 0;
    while i < text.len() {
        match text[i] {
            b'"' => {
                let start = i + 1;
                let mut j = start;
                while j < text.len() && text[j] != b'"' {
                    j += if text[j] == b'\\' { 2 } else { 1 };
                }
                if j >= text.len() {
                    return fail(format!("unterminated string at byte {i}"));
                }
                let mut k = j + 1;
                while k < text.len() && text[k].is_ascii_whitespace() {
                    k += 1;
                }
                if k < text.len() && text[k] == b':' {
                    key = Some(text[start..j].to_vec());
                } else {
                    let kind = match key.as_deref() {
                        Some(b"Code") => Some(FieldKind::Code),
                        Some(b"Sub-code") => Some(FieldKind::SubCode),
                        Some(b"Span") => Some(FieldKind::Span),
                        _ => None,
                    };
                    if let Some(kind) = kind {
                        out.push((kind, start..j));
                    }
                    key = None;
                }
                i = j + 1;
            }
            _ => i += 1,
        }
    }
    let count = |k: FieldKind| out.iter().filter(|(f, _)| *f == k).count();
    let (c, s, p) = (count(FieldKind::Code), count(FieldKind::SubCode), count(FieldKind::Span));
    if c != s || s != p {
        return fail(format!("unbalanced fields: {c} Code, {s} Sub-code, {p} Span"));
    }
    Ok(out)
}

/// Tokenizes `prompt ∥ "\n" ∥ completion` (plus BOS/EOS) and records which
/// completion tokens fall strictly inside each field's quoted value.
pub fn tokenize_with_fields(prompt: &str, completion: &str) -> Result<TokenizedCompletion, SchemaError> {
    let mut tokens = encode_prompt(prompt);
    let completion_start = tokens.len();
    tokens.extend(completion.bytes().map(u32::from));
    tokens.push(EOS);

    let mut code_positions = Vec::new();
    let mut subcode_positions = Vec::new();
    let mut span_positions = Vec::new();
    for (kind, range) in recover_field_ranges(completion.as_bytes())? {
        let target = match kind {
            FieldKind::Code => &mut code_positions,
            FieldKind::SubCode => &mut subcode_positions,
            FieldKind::Span => &mut span_positions,
        };
        target.extend(range.map(|b| completion_start + b));
    }
    let mut weights = vec![0.0; tokens.len()];
    for &p in code_positions.iter().chain(&subcode_positions).chain(&span_positions) {
        weights[p] = 1.0;
    }
    Ok(TokenizedCompletion {
        tokens,
        completion_start,
        code_positions,
        subcode_positions,
        span_positions,
        weights,
    })
}

/// Tokenizes the canonical serialization of `labels` under `prompt`.
pub fn tokenize_labels(prompt: &str, labels: &LabelSet) -> TokenizedCompletion {
    tokenize_with_fields(prompt, &canonical_serialize(labels))
        .expect("canonical serialization always has recoverable fields")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codebook() -> Codebook {
        let mut h = BTreeMap::new();
        h.insert("C1".to_string(), vec!["S1".to_string(), "S2".to_string()]);
        h.insert("C2".to_string(), vec![NONE_SUBCODE.to_string()]);
        Codebook::new(
            vec!["C1".into(), "C2".into()],
            vec!["S1".into(), "S2".into(), "S3".into(), NONE_SUBCODE.into()],
            h,
        )
        .unwrap()
    }

    fn one() -> LabelSet {
        LabelSet::new(vec![AnnotationTuple::new("C1", "S1", "hi")]).unwrap()
    }

    #[test]
    fn serialize_empty_and_single() {
        assert_eq!(canonical_serialize(&LabelSet::empty()), r#"{"results": []}"#);
        assert_eq!(
            canonical_serialize(&one()),
            r#"{"results": [{"Code": "C1", "Sub-code": "S1", "Span": "hi"}]}"#
        );
    }

    #[test]
    fn serialize_parse_serialize_is_idempotent() {
        let cb = codebook();
        let ls = LabelSet::new(vec![
            AnnotationTuple::new("C1", "S2", "say \"thanks\"\n"),
            AnnotationTuple::new("C2", "None", "ok"),
        ])
        .unwrap();
        let s1 = canonical_serialize(&ls);
        let back = parse_output(&s1, &cb).unwrap();
        assert_eq!(back, ls);
        assert_eq!(canonical_serialize(&back), s1);
    }

    #[test]
    fn parse_errors_are_distinct() {
        let cb = codebook();
        assert_eq!(parse_output(r#"{"results": []}"#, &cb).unwrap(), LabelSet::empty());
        assert!(matches!(
            parse_output(r#"{"results": []} and that's it"#, &cb),
            Err(SchemaError::MalformedOutput(_))
        ));
        assert!(matches!(
            parse_output(r#"{"results": [{"Code": "C1", "Sub-code": "S1"}]}"#, &cb),
            Err(SchemaError::MalformedOutput(_))
        ));
        assert!(matches!(
            parse_output(r#"{"results": [{"Code": "C9", "Sub-code": "S1", "Span": "x"}]}"#, &cb),
            Err(SchemaError::InvalidLabel { level: "code", .. })
        ));
        assert!(matches!(
            parse_output(r#"{"results": [{"Code": "C1", "Sub-code": "Q", "Span": "x"}]}"#, &cb),
            Err(SchemaError::InvalidLabel { level: "sub-code", .. })
        ));
        assert!(matches!(
            parse_output(r#"{"results": [{"Code": "C1", "Sub-code": "S3", "Span": "x"}]}"#, &cb),
            Err(SchemaError::HierarchyViolation { .. })
        ));
        assert!(matches!(
            parse_output(r#"{"results": [], "extra": 1}"#, &cb),
            Err(SchemaError::MalformedOutput(_))
        ));
    }

    #[test]
    fn duplicates_collapse_on_parse() {
        let cb = codebook();
        let text = r#"{"results": [{"Code": "C1", "Sub-code": "S1", "Span": "hi"}, {"Code": "C1", "Sub-code": "S1", "Span": "hi"}]}"#;
        let p = parse_output_detailed(text, &cb).unwrap();
        assert_eq!(p.labels, one());
        assert_eq!(p.duplicates_collapsed, 1);
        assert_eq!(parse_output_tuples(text, &cb).unwrap().len(), 2);
    }

    #[test]
    fn label_set_rejects_duplicates() {
        let t = AnnotationTuple::new("C1", "S1", "hi");
        assert!(matches!(
            LabelSet::new(vec![t.clone(), t]),
            Err(SchemaError::DuplicateTuple { .. })
        ));
    }

    #[test]
    fn codebook_invariants() {
        let mut h = BTreeMap::new();
        h.insert("C1".to_string(), vec!["S9".to_string()]);
        assert!(Codebook::new(vec!["C1".into()], vec!["S1".into()], h).is_err());
        let mut h = BTreeMap::new();
        h.insert("C1".to_string(), vec![]);
        assert!(Codebook::new(vec!["C1".into()], vec!["S1".into()], h).is_err());
        let json = serde_json::to_string(&codebook()).unwrap();
        let back: Codebook = serde_json::from_str(&json).unwrap();
        assert_eq!(back, codebook());
    }

    #[test]
    fn validation_report_flags() {
        let cb = codebook();
        let ls = LabelSet::new(vec![
            AnnotationTuple::new("C1", "S1", "hello"),
            AnnotationTuple::new("C1", "S1", "xyz"),
            AnnotationTuple::new("C2", "S3", "hello"),
        ])
        .unwrap();
        let r = validate_label_set(&ls, &cb, "hello there");
        assert!(r.tuples[0].hierarchy_valid && r.tuples[0].grounded);
        assert!(!r.tuples[1].grounded);
        assert!(!r.tuples[2].hierarchy_valid);
        assert!(!r.passed);
    }

    #[test]
    fn tokenize_empty_completion_has_no_fields() {
        let tc = tokenize_with_fields("p", r#"{"results": []}"#).unwrap();
        assert!(tc.code_positions.is_empty());
        assert!(tc.subcode_positions.is_empty());
        assert!(tc.span_positions.is_empty());
        assert!(tc.weights.iter().all(|&w| w == 0.0));
        assert_eq!(tc.completion_mask().iter().map(|&m| m as usize).sum::<usize>(), 16);
    }

    #[test]
    fn tokenize_single_tuple_fields() {
        let completion = canonical_serialize(&one());
        let tc = tokenize_with_fields("prompt", &completion).unwrap();
        assert_eq!(tc.prompt_tokens(), encode_prompt("prompt").as_slice());
        let mask = tc.completion_mask();
        assert!(tc.prompt_tokens().iter().enumerate().all(|(i, _)| mask[i] == 0));
        let text = |ps: &[usize]| decode_tokens(&ps.iter().map(|&p| tc.tokens[p]).collect::<Vec<_>>());
        assert_eq!(text(&tc.code_positions), "C1");
        assert_eq!(text(&tc.subcode_positions), "S1");
        assert_eq!(text(&tc.span_positions), "hi");
        for p in tc.code_positions.iter().chain(&tc.subcode_positions).chain(&tc.span_positions) {
            assert_eq!(mask[*p], 1);
        }
        assert_eq!(*tc.tokens.last().unwrap(), EOS);
    }

    #[test]
    fn field_recovery_rejects_unbalanced_text() {
        assert!(matches!(
            tokenize_with_fields("p", r#"{"results": [{"Code": "C1"}]}"#),
            Err(SchemaError::FieldRecoveryFailure(_))
        ));
        assert!(matches!(
            tokenize_with_fields("p", r#"{"Code": "C1"#),
            Err(SchemaError::FieldRecoveryFailure(_))
        ));
    }

    #[test]
    fn escaped_span_bytes_stay_inside_field() {
        let ls = LabelSet::new(vec![AnnotationTuple::new("C1", "S1", "a\"b")]).unwrap();
        let tc = tokenize_labels("p", &ls);
        // a \ " b
        assert_eq!(tc.span_positions.len(), 4);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn codebook() -> Codebook {
        let mut h = BTreeMap::new();
        h.insert("A".to_string(), vec!["a1".to_string(), "a2".to_string()]);
        h.insert("B".to_string(), vec!["b1".to_string(), NONE_SUBCODE.to_string()]);
        Codebook::new(
            vec!["A".into(), "B".into()],
            vec!["a1".into(), "a2".into(), "b1".into(), NONE_SUBCODE.into()],
            h,
        )
        .unwrap()
    }

    fn label_set() -> impl Strategy<Value = LabelSet> {
        let leaf = prop_oneof![
            Just(("A", "a1")),
            Just(("A", "a2")),
            Just(("B", "b1")),
            Just(("B", "None"))
        ];
        prop::collection::vec((leaf, "[ -~\\n\\t]{1,12}"), 0..6).prop_map(|v| {
            let tuples = v
                .into_iter()
                .map(|((c, s), span)| AnnotationTuple::new(c, s, span))
                .collect();
            LabelSet::dedup_from(tuples).0
        })
    }

    proptest! {
        #[test]
        fn round_trip(ls in label_set()) {
            let cb = codebook();
            let text = canonical_serialize(&ls);
            prop_assert_eq!(parse_output(&text, &cb).unwrap(), ls);
        }

        #[test]
        fn fields_disjoint_and_masked(ls in label_set()) {
            let tc = tokenize_labels("some prompt", &ls);
            let mask = tc.completion_mask();
            let a: BTreeSet<_> = tc.code_positions.iter().collect();
            let b: BTreeSet<_> = tc.subcode_positions.iter().collect();
            let c: BTreeSet<_> = tc.span_positions.iter().collect();
            prop_assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
            for p in a.iter().chain(b.iter()).chain(c.iter()) {
                prop_assert_eq!(mask[**p], 1);
            }
            let span_bytes: usize = ls.tuples().iter().map(|t| json_str(&t.span).len() - 2).sum();
            prop_assert_eq!(tc.span_positions.len(), span_bytes);
            prop_assert_eq!(tokenize_labels("some prompt", &ls), tc);
        }
    }
}
