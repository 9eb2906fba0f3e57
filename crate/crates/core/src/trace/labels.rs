//! Correctness labels and the string-overlap fallback judge.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Condition, TraceKey};
use crate::error::{Error, Result};

/// Sidecar label file of a dataset: `<dataset>.labels.jsonl`.
pub fn labels_path_for(dataset: &Path) -> std::path::PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".labels.jsonl");
    s.into()
}

/// Default token-F1 threshold for the fallback judge.
pub const DEFAULT_THETA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeKind {
    Llm,
    ExactMatch,
    TokenF1,
}

/// One line of a label file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub question_id: String,
    pub condition: Condition,
    pub sample_index: u32,
    pub z: u8,
    /// Half-open token range `[start, end)` of the extracted answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exact_answer_span: Option<[u32; 2]>,
    pub judge: JudgeKind,
    /// Set by producers that had to fall back or repair the judge output.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flagged: bool,
}

impl LabelRecord {
    pub fn key(&self) -> TraceKey {
        TraceKey::new(self.question_id.clone(), self.condition, self.sample_index)
    }

    pub fn is_correct(&self) -> bool {
        self.z == 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.z > 1 {
            return Err(Error::Data(format!("label {}: z must be 0 or 1, got {}", self.key(), self.z)));
        }
        if let Some([start, end]) = self.exact_answer_span {
            if start >= end {
                return Err(Error::Data(format!("label {}: empty span [{start}, {end})", self.key())));
            }
        }
        Ok(())
    }

    /// Span check against the response length T.
    pub fn validate_span(&self, n_tokens: usize) -> Result<()> {
        match self.exact_answer_span {
            Some([_, end]) if end as usize > n_tokens => Err(Error::Data(format!(
                "label {}: span end {end} beyond {n_tokens} tokens",
                self.key()
            ))),
            _ => Ok(()),
        }
    }
}

/// Labels keyed by response.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelSet {
    records: BTreeMap<TraceKey, LabelRecord>,
}

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: LabelRecord) -> Result<()> {
        record.validate()?;
        let key = record.key();
        if let Some(prev) = self.records.get(&key) {
            if prev != &record {
                return Err(Error::Data(format!("conflicting labels for {key}")));
            }
        }
        self.records.insert(key, record);
        Ok(())
    }

    pub fn get(&self, key: &TraceKey) -> Option<&LabelRecord> {
        self.records.get(key)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LabelRecord> {
        self.records.values()
    }
}

impl FromIterator<LabelRecord> for LabelSet {
    fn from_iter<I: IntoIterator<Item = LabelRecord>>(iter: I) -> Self {
        Self {
            records: iter.into_iter().map(|r| (r.key(), r)).collect(),
        }
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelSet> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut set = LabelSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LabelRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        set.insert(record)?;
    }
    Ok(set)
}

/// Writes labels as JSONL in key order.
pub fn write_labels(path: impl AsRef<Path>, labels: &LabelSet) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in labels.iter() {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Lowercases, drops punctuation and splits on whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Bag-of-tokens F1 between normalized prediction and reference.
pub fn token_f1(prediction: &str, reference: &str) -> f64 {
    let pred = normalize_answer(prediction);
    let gold = normalize_answer(reference);
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in &gold {
        *counts.entry(tok).or_default() += 1;
    }
    let mut common = 0usize;
    for tok in &pred {
        if let Some(c) = counts.get_mut(tok.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Correct when normalized strings match exactly or token F1 reaches `theta`.
pub fn fallback_judgement(response_text: &str, gold_answer: &str, theta: f64) -> (bool, JudgeKind) {
    let pred = normalize_answer(response_text);
    if !pred.is_empty() && pred == normalize_answer(gold_answer) {
        return (true, JudgeKind::ExactMatch);
    }
    (token_f1(response_text, gold_answer) >= theta, JudgeKind::TokenF1)
}

pub fn fallback_label(key: TraceKey, response_text: &str, gold_answer: &str, theta: f64) -> LabelRecord {
    let (correct, judge) = fallback_judgement(response_text, gold_answer, theta);
    LabelRecord {
        question_id: key.question_id,
        condition: key.condition,
        sample_index: key.sample_index,
        z: u8::from(correct),
        exact_answer_span: None,
        judge,
        flagged: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> TraceKey {
        TraceKey::new("q", Condition::Woc, 0)
    }

    #[test]
    fn normalization_makes_exact_match() {
        let l = fallback_label(key(), "Paris", "paris.", DEFAULT_THETA);
        assert_eq!((l.z, l.judge), (1, JudgeKind::ExactMatch));
    }

    #[test]
    fn partial_overlap_below_threshold() {
        // Independent check: precision 1/4, recall 1/1 -> F1 = 0.4.
        assert!((token_f1("the capital is Paris", "Paris") - 0.4).abs() < 1e-15);
        let l = fallback_label(key(), "the capital is Paris", "Paris", 0.5);
        assert_eq!((l.z, l.judge), (0, JudgeKind::TokenF1));
        let lenient = fallback_label(key(), "the capital is Paris", "Paris", 0.4);
        assert_eq!(lenient.z, 1);
    }

    #[test]
    fn disjoint_answers() {
        let l = fallback_label(key(), "London", "Paris", DEFAULT_THETA);
        assert_eq!(l.z, 0);
        assert_eq!(token_f1("", "Paris"), 0.0);
    }

    #[test]
    fn repeated_tokens_count_once_per_match() {
        // pred: paris paris (2), gold: paris (1) -> P = 1/2, R = 1 -> 2/3
        assert!((token_f1("Paris Paris", "Paris") - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn jsonl_shape() {
        let rec = LabelRecord {
            question_id: "q7".into(),
            condition: Condition::Wic,
            sample_index: 3,
            z: 1,
            exact_answer_span: Some([2, 4]),
            judge: JudgeKind::Llm,
            flagged: false,
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert_eq!(
            line,
            r#"{"question_id":"q7","condition":"WIC","sample_index":3,"z":1,"exact_answer_span":[2,4],"judge":"llm"}"#
        );
        let back: LabelRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn invalid_z_and_conflicts_rejected() {
        let mut set = LabelSet::new();
        let mut rec = fallback_label(key(), "a", "a", 0.5);
        rec.z = 2;
        assert!(set.insert(rec.clone()).is_err());
        rec.z = 1;
        set.insert(rec.clone()).unwrap();
        set.insert(rec.clone()).unwrap();
        rec.z = 0;
        assert!(matches!(set.insert(rec), Err(Error::Data(_))));
    }
}
