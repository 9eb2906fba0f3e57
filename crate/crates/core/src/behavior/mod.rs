//! Correctness ratios, response regimes and context transitions.
//!
//! A question's M sampled responses under one context condition give a
//! correctness ratio r. The ratio places the question in a regime: mostly
//! correct (C, r > τ_C), mostly wrong (E, r < τ_E), or the band between.
//! Transitions pick out questions whose regime changes between two
//! conditions, and carry the per-response uncertainty scores of both sides
//! so their distributions can be compared.

mod kde;
mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{score_trace, ScoreBounds, ScoreKind, ScoringConfig};
use crate::trace::{Condition, GenerationTrace, LabelRecord, TraceKey};

pub use kde::{density_at, kde, silverman_bandwidth, BandwidthRule, DensityCurve, GRID_POINTS};
pub use stats::{quantile_sorted, summarize_distribution, DistributionSummary};

pub const DEFAULT_TAU_C: f64 = 0.6;
pub const DEFAULT_TAU_E: f64 = 0.4;

/// Ordered E < Mid < C.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Regime {
    E,
    #[serde(rename = "MID")]
    Mid,
    C,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::E => "E",
            Regime::Mid => "MID",
            Regime::C => "C",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "E" => Ok(Regime::E),
            "MID" => Ok(Regime::Mid),
            "C" => Ok(Regime::C),
            _ => Err(Error::Config(format!("unknown regime {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeThresholds {
    pub tau_c: f64,
    pub tau_e: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        Self {
            tau_c: DEFAULT_TAU_C,
            tau_e: DEFAULT_TAU_E,
        }
    }
}

impl RegimeThresholds {
    pub fn new(tau_c: f64, tau_e: f64) -> Result<Self> {
        let t = Self { tau_c, tau_e };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.tau_e && self.tau_e <= self.tau_c && self.tau_c <= 1.0) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 <= tau_e <= tau_c <= 1, got tau_e={} tau_c={}",
                self.tau_e, self.tau_c
            )));
        }
        Ok(())
    }
}

pub fn correctness_ratio(labels: &[u8]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Data("correctness ratio of zero responses".into()));
    }
    if labels.iter().any(|&z| z > 1) {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    let correct = labels.iter().map(|&z| u32::from(z)).sum::<u32>();
    Ok(f64::from(correct) / labels.len() as f64)
}

pub fn classify_regime(r: f64, tau_c: f64, tau_e: f64) -> Result<Regime> {
    RegimeThresholds::new(tau_c, tau_e)?;
    Ok(if r > tau_c {
        Regime::C
    } else if r < tau_e {
        Regime::E
    } else {
        Regime::Mid
    })
}

/// One labeled, scored response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSummary {
    pub sample_index: u32,
    pub z: u8,
    pub bounds: ScoreBounds,
}

impl ResponseSummary {
    /// Scores a labeled trace.
    pub fn score(trace: &GenerationTrace, label: &LabelRecord, scoring: &ScoringConfig) -> Result<(TraceKey, Self)> {
        let scores = score_trace(trace, scoring)?;
        let summary = Self {
            sample_index: trace.sample_index,
            z: label.z,
            bounds: scores.bounds,
        };
        Ok((trace.key(), summary))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRecord {
    /// Labels ordered by sample index.
    pub labels: Vec<u8>,
    pub ratio: f64,
    pub regime: Regime,
    pub responses: Vec<ResponseSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub conditions: BTreeMap<Condition, ConditionRecord>,
}

/// Groups labeled responses by question and condition and classifies each group.
pub fn build_question_records<I>(responses: I, thresholds: RegimeThresholds) -> Result<Vec<QuestionRecord>>
where
    I: IntoIterator<Item = (TraceKey, ResponseSummary)>,
{
    thresholds.validate()?;
    let mut grouped: BTreeMap<String, BTreeMap<Condition, Vec<ResponseSummary>>> = BTreeMap::new();
    for (key, summary) in responses {
        grouped
            .entry(key.question_id)
            .or_default()
            .entry(key.condition)
            .or_default()
            .push(summary);
    }
    grouped
        .into_iter()
        .map(|(question_id, by_condition)| {
            let conditions = by_condition
                .into_iter()
                .map(|(cond, mut responses)| {
                    responses.sort_by_key(|r| r.sample_index);
                    let labels: Vec<u8> = responses.iter().map(|r| r.z).collect();
                    let ratio = correctness_ratio(&labels)?;
                    let regime = classify_regime(ratio, thresholds.tau_c, thresholds.tau_e)?;
                    Ok((cond, ConditionRecord { labels, ratio, regime, responses }))
                })
                .collect::<Result<_>>()?;
            Ok(QuestionRecord { question_id, conditions })
        })
        .collect()
}

/// A `condition:regime` pair such as `WOC:E`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegimeState {
    pub condition: Condition,
    pub regime: Regime,
}

impl fmt::Display for RegimeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.condition, self.regime)
    }
}

impl FromStr for RegimeState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (c, r) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("expected CONDITION:REGIME, got {s:?}")))?;
        Ok(Self {
            condition: c.trim().parse()?,
            regime: r.trim().parse()?,
        })
    }
}

/// `from -> to` pair of regime states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransitionSpec {
    pub from: RegimeState,
    pub to: RegimeState,
}

impl TransitionSpec {
    /// WOC:E -> WCC:C, correct context rescues a mostly wrong question.
    pub const RESCUED_BY_CONTEXT: TransitionSpec = TransitionSpec {
        from: RegimeState {
            condition: Condition::Woc,
            regime: Regime::E,
        },
        to: RegimeState {
            condition: Condition::Wcc,
            regime: Regime::C,
        },
    };

    /// WOC:C -> WIC:E, misleading context breaks a mostly correct question.
    pub const MISLED_BY_CONTEXT: TransitionSpec = TransitionSpec {
        from: RegimeState {
            condition: Condition::Woc,
            regime: Regime::C,
        },
        to: RegimeState {
            condition: Condition::Wic,
            regime: Regime::E,
        },
    };

    pub fn defaults() -> Vec<TransitionSpec> {
        vec![Self::RESCUED_BY_CONTEXT, Self::MISLED_BY_CONTEXT]
    }
}

impl fmt::Display for TransitionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

impl FromStr for TransitionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once("->")
            .ok_or_else(|| Error::Config(format!("expected FROM->TO, got {s:?}")))?;
        Ok(Self {
            from: a.parse()?,
            to: b.parse()?,
        })
    }
}

/// How response scores of a transition's questions are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// One sample per response.
    #[default]
    PerResponse,
    /// One sample per question: the mean over its responses.
    PerQuestion,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-response" => Ok(Self::PerResponse),
            "per-question" => Ok(Self::PerQuestion),
            other => Err(Error::Config(format!("unknown pooling {other:?}"))),
        }
    }
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::PerResponse => "per-response",
            Pooling::PerQuestion => "per-question",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSet {
    pub spec: TransitionSpec,
    pub score: ScoreKind,
    pub question_ids: BTreeSet<String>,
    pub from_samples: Vec<f64>,
    pub to_samples: Vec<f64>,
    /// Questions lacking one of the two conditions.
    pub skipped: usize,
}

pub fn find_transitions(
    records: &[QuestionRecord],
    spec: TransitionSpec,
    score: ScoreKind,
    pooling: Pooling,
) -> TransitionSet {
    let mut set = TransitionSet {
        spec,
        score,
        question_ids: BTreeSet::new(),
        from_samples: Vec::new(),
        to_samples: Vec::new(),
        skipped: 0,
    };
    for q in records {
        let (Some(from), Some(to)) = (q.conditions.get(&spec.from.condition), q.conditions.get(&spec.to.condition)) else {
            set.skipped += 1;
            continue;
        };
        if from.regime != spec.from.regime || to.regime != spec.to.regime {
            continue;
        }
        set.question_ids.insert(q.question_id.clone());
        pool_into(&mut set.from_samples, from, score, pooling);
        pool_into(&mut set.to_samples, to, score, pooling);
    }
    set
}

fn pool_into(out: &mut Vec<f64>, rec: &ConditionRecord, score: ScoreKind, pooling: Pooling) {
    let values = rec.responses.iter().map(|r| r.bounds.get(score));
    match pooling {
        Pooling::PerResponse => out.extend(values),
        Pooling::PerQuestion => {
            let n = rec.responses.len();
            if n > 0 {
                out.push(values.sum::<f64>() / n as f64);
            }
        }
    }
}

/// Distribution summary of a transition's two sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub transition: String,
    pub score: String,
    pub pooling: Pooling,
    pub n_questions: usize,
    pub question_ids: Vec<String>,
    pub skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub from_summary: Option<DistributionSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub to_summary: Option<DistributionSummary>,
    /// `to.mean - from.mean`; negative is a leftward shift.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_shift: Option<f64>,
}

pub fn summarize_transition(set: &TransitionSet, pooling: Pooling) -> TransitionReport {
    let from_summary = summarize_distribution(&set.from_samples).ok();
    let to_summary = summarize_distribution(&set.to_samples).ok();
    let mean_shift = match (&from_summary, &to_summary) {
        (Some(f), Some(t)) => Some(t.mean - f.mean),
        _ => None,
    };
    TransitionReport {
        transition: set.spec.to_string(),
        score: set.score.to_string(),
        pooling,
        n_questions: set.question_ids.len(),
        question_ids: set.question_ids.iter().cloned().collect(),
        skipped: set.skipped,
        from_summary,
        to_summary,
        mean_shift,
    }
}
