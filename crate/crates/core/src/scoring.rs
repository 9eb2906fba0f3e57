//! Response-level scoring of a stored trace.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::{
    score_response_logprob, score_response_logtoku, score_token, uncertainty_bounds, AuVariant, EvidenceTransform,
    TokenScores, DEFAULT_K_AGG, DEFAULT_K_BOUND, DEFAULT_K_EVIDENCE,
};
use crate::trace::{GenerationTrace, TraceKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub k_evidence: usize,
    pub transform: EvidenceTransform,
    pub au_variant: AuVariant,
    pub k_agg: usize,
    pub k_bound: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            k_evidence: DEFAULT_K_EVIDENCE,
            transform: EvidenceTransform::Relu,
            au_variant: AuVariant::Evidence,
            k_agg: DEFAULT_K_AGG,
            k_bound: DEFAULT_K_BOUND,
        }
    }
}

/// Which per-token uncertainty a computation consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenMeasure {
    #[default]
    Eu,
    Au,
    Reliability,
}

impl TokenMeasure {
    pub fn of(self, t: &TokenScores) -> f64 {
        match self {
            TokenMeasure::Eu => t.eu,
            TokenMeasure::Au => t.au,
            TokenMeasure::Reliability => t.reliability,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TokenMeasure::Eu => "eu",
            TokenMeasure::Au => "au",
            TokenMeasure::Reliability => "reliability",
        }
    }
}

impl FromStr for TokenMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eu" => Ok(Self::Eu),
            "au" => Ok(Self::Au),
            "reliability" | "rel" => Ok(Self::Reliability),
            other => Err(Error::Config(format!("unknown token measure {other:?}"))),
        }
    }
}

/// A response-level summary statistic: one bound of one token measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreKind {
    pub measure: TokenMeasure,
    pub upper: bool,
}

impl Default for ScoreKind {
    /// Lower-bound epistemic uncertainty.
    fn default() -> Self {
        Self {
            measure: TokenMeasure::Eu,
            upper: false,
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = if self.upper { "upper" } else { "lower" };
        write!(f, "{}-{side}", self.measure.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    /// Parses `eu-lower`, `au-upper`, `reliability-lower`, ...
    fn from_str(s: &str) -> Result<Self> {
        let (measure, side) = s
            .rsplit_once('-')
            .ok_or_else(|| Error::Config(format!("score kind {s:?} must look like eu-lower")))?;
        let upper = match side {
            "lower" => false,
            "upper" => true,
            other => return Err(Error::Config(format!("unknown bound side {other:?}"))),
        };
        Ok(Self {
            measure: measure.parse()?,
            upper,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBounds {
    pub eu_lower: f64,
    pub eu_upper: f64,
    pub au_lower: f64,
    pub au_upper: f64,
    pub rel_lower: f64,
    pub rel_upper: f64,
}

impl ScoreBounds {
    pub fn get(&self, kind: ScoreKind) -> f64 {
        match (kind.measure, kind.upper) {
            (TokenMeasure::Eu, false) => self.eu_lower,
            (TokenMeasure::Eu, true) => self.eu_upper,
            (TokenMeasure::Au, false) => self.au_lower,
            (TokenMeasure::Au, true) => self.au_upper,
            (TokenMeasure::Reliability, false) => self.rel_lower,
            (TokenMeasure::Reliability, true) => self.rel_upper,
        }
    }
}

/// All scorer outputs for one response.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseScores {
    pub key: TraceKey,
    pub tokens: Vec<TokenScores>,
    pub logprob: f64,
    pub logtoku: f64,
    pub p_true: Option<f64>,
    pub bounds: ScoreBounds,
}

impl ResponseScores {
    pub fn token_measure(&self, measure: TokenMeasure) -> Vec<f64> {
        self.tokens.iter().map(|t| measure.of(t)).collect()
    }
}

pub fn score_tokens(trace: &GenerationTrace, cfg: &ScoringConfig) -> Result<Vec<TokenScores>> {
    (0..trace.len())
        .map(|t| {
            score_token(
                trace.topk_logits.row(t),
                cfg.k_evidence,
                cfg.transform,
                cfg.au_variant,
                f64::from(trace.chosen_logprobs[t]),
            )
        })
        .collect()
}

pub fn score_trace(trace: &GenerationTrace, cfg: &ScoringConfig) -> Result<ResponseScores> {
    let tokens = score_tokens(trace, cfg)?;
    let eu: Vec<f64> = tokens.iter().map(|t| t.eu).collect();
    let au: Vec<f64> = tokens.iter().map(|t| t.au).collect();
    let rel: Vec<f64> = tokens.iter().map(|t| t.reliability).collect();
    let eu_b = uncertainty_bounds(&eu, cfg.k_bound)?;
    let au_b = uncertainty_bounds(&au, cfg.k_bound)?;
    let rel_b = uncertainty_bounds(&rel, cfg.k_bound)?;
    Ok(ResponseScores {
        key: trace.key(),
        logprob: score_response_logprob(&trace.chosen_logprobs)?,
        logtoku: score_response_logtoku(&rel, cfg.k_agg)?,
        p_true: trace.p_true,
        bounds: ScoreBounds {
            eu_lower: eu_b.lower,
            eu_upper: eu_b.upper,
            au_lower: au_b.lower,
            au_upper: au_b.upper,
            rel_lower: rel_b.lower,
            rel_upper: rel_b.upper,
        },
        tokens,
    })
}
