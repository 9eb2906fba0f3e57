//! Token- and response-level uncertainty from top-K logits.
//!
//! Each generated token's top-K logits are mapped to non-negative evidence
//! `a_k`, which parameterises a Dirichlet over the K candidate tokens.
//! Aleatoric uncertainty is the expected entropy of that Dirichlet,
//! epistemic uncertainty is `K / Σ (a_k + 1)`, and a token's reliability is
//! `-AU · EU`. Response-level scores aggregate these per-token values.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::digamma_positive;

/// Total evidence at or below this is treated as no evidence at all.
pub const ZERO_EVIDENCE_EPS: f64 = 1e-12;

/// Default number of top logits turned into evidence per token.
pub const DEFAULT_K_EVIDENCE: usize = 10;

/// Default number of least reliable tokens averaged by LogTokU.
pub const DEFAULT_K_AGG: usize = 10;

/// Default number of tokens averaged for the lower/upper uncertainty bounds.
pub const DEFAULT_K_BOUND: usize = 10;

/// How raw logits become non-negative evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvidenceTransform {
    #[default]
    Relu,
    Softplus,
    ShiftMin,
}

impl EvidenceTransform {
    pub fn as_str(self) -> &'static str {
        match self {
            EvidenceTransform::Relu => "relu",
            EvidenceTransform::Softplus => "softplus",
            EvidenceTransform::ShiftMin => "shift-min",
        }
    }
}

impl fmt::Display for EvidenceTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvidenceTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "softplus" => Ok(Self::Softplus),
            "shift-min" => Ok(Self::ShiftMin),
            other => Err(Error::Config(format!(
                "unknown evidence transform {other:?} (expected relu, softplus or shift-min)"
            ))),
        }
    }
}

/// Which Dirichlet parameters enter the expected-entropy formula.
///
/// `Evidence` uses the evidence values directly (`a_k / a_0`), `Alpha` uses
/// the shifted concentrations `α_k = a_k + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuVariant {
    #[default]
    Evidence,
    Alpha,
}

impl AuVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AuVariant::Evidence => "evidence",
            AuVariant::Alpha => "alpha",
        }
    }
}

impl FromStr for AuVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evidence" => Ok(Self::Evidence),
            "alpha" => Ok(Self::Alpha),
            other => Err(Error::Config(format!(
                "unknown AU variant {other:?} (expected evidence or alpha)"
            ))),
        }
    }
}

/// Non-negative evidence for the top-K candidate tokens at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceVector {
    values: Vec<f64>,
    transform: EvidenceTransform,
}

impl EvidenceVector {
    /// Wraps already non-negative evidence values.
    pub fn new(values: Vec<f64>, transform: EvidenceTransform) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Shape(format!(
                "evidence needs K >= 2 values, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Data(format!("evidence must be finite and >= 0, got {v}")));
        }
        Ok(Self { values, transform })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn k_evidence(&self) -> usize {
        self.values.len()
    }

    pub fn transform(&self) -> EvidenceTransform {
        self.transform
    }

    /// Total evidence a_0.
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Per-token uncertainty scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    pub au: f64,
    pub eu: f64,
    pub logprob: f64,
    pub reliability: f64,
}

/// Mean of the `k` smallest and `k` largest token scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBounds {
    pub lower: f64,
    pub upper: f64,
    pub k_bound: usize,
}

pub fn evidence_from_logits<T>(topk_logits: &[T], transform: EvidenceTransform) -> Result<EvidenceVector>
where
    T: Copy + Into<f64>,
{
    if topk_logits.len() < 2 {
        return Err(Error::Shape(format!(
            "need at least 2 logits for evidence, got {}",
            topk_logits.len()
        )));
    }
    let logits: Vec<f64> = topk_logits.iter().map(|&x| x.into()).collect();
    if let Some(x) = logits.iter().find(|x| !x.is_finite()) {
        return Err(Error::Data(format!("non-finite logit {x}")));
    }
    let values = match transform {
        EvidenceTransform::Relu => logits.iter().map(|&x| x.max(0.0)).collect(),
        EvidenceTransform::Softplus => logits.iter().map(|&x| softplus(x)).collect(),
        EvidenceTransform::ShiftMin => {
            let min = logits.iter().copied().fold(f64::INFINITY, f64::min);
            logits.iter().map(|&x| x - min).collect()
        }
    };
    EvidenceVector::new(values, transform)
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow for large x.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Expected entropy of the Dirichlet built from `e` (the `Evidence` variant).
pub fn aleatoric_uncertainty(e: &EvidenceVector) -> f64 {
    aleatoric_uncertainty_with(e, AuVariant::Evidence)
}

pub fn aleatoric_uncertainty_with(e: &EvidenceVector, variant: AuVariant) -> f64 {
    let k = e.k_evidence() as f64;
    let shift = match variant {
        AuVariant::Evidence => 0.0,
        AuVariant::Alpha => 1.0,
    };
    let total = e.total() + shift * k;
    if total <= ZERO_EVIDENCE_EPS {
        return k.ln();
    }
    let psi_total = digamma_positive(total + 1.0);
    let au = -e
        .values()
        .iter()
        .map(|&a| {
            let a = a + shift;
            (a / total) * (digamma_positive(a + 1.0) - psi_total)
        })
        .sum::<f64>();
    // Rounding can push the sum a hair outside [0, ln K].
    au.clamp(0.0, k.ln())
}

pub fn epistemic_uncertainty(e: &EvidenceVector) -> f64 {
    let k = e.k_evidence() as f64;
    k / (e.total() + k)
}

pub fn token_reliability(au: f64, eu: f64) -> f64 {
    -(au * eu)
}

/// Scores one token from its stored top logits and chosen-token log-prob.
pub fn score_token<T>(
    topk_logits: &[T],
    k_evidence: usize,
    transform: EvidenceTransform,
    variant: AuVariant,
    logprob: f64,
) -> Result<TokenScores>
where
    T: Copy + Into<f64>,
{
    if k_evidence > topk_logits.len() {
        return Err(Error::Shape(format!(
            "k_evidence {k_evidence} exceeds stored top-K width {}",
            topk_logits.len()
        )));
    }
    let e = evidence_from_logits(&topk_logits[..k_evidence], transform)?;
    let au = aleatoric_uncertainty_with(&e, variant);
    let eu = epistemic_uncertainty(&e);
    Ok(TokenScores {
        au,
        eu,
        logprob,
        reliability: token_reliability(au, eu),
    })
}

/// Mean chosen-token log-probability (the LogProb baseline).
pub fn score_response_logprob<T>(token_logprobs: &[T]) -> Result<f64>
where
    T: Copy + Into<f64>,
{
    if token_logprobs.is_empty() {
        return Err(Error::Data("cannot score an empty response".into()));
    }
    let sum: f64 = token_logprobs.iter().map(|&x| x.into()).sum();
    Ok(sum / token_logprobs.len() as f64)
}

/// LogTokU: mean reliability over the `k_agg` least reliable tokens.
pub fn score_response_logtoku(token_reliabilities: &[f64], k_agg: usize) -> Result<f64> {
    if token_reliabilities.is_empty() {
        return Err(Error::Data("cannot score an empty response".into()));
    }
    if k_agg == 0 {
        return Err(Error::Config("k_agg must be >= 1".into()));
    }
    let picked = smallest_indices(token_reliabilities, k_agg);
    Ok(mean_at(token_reliabilities, &picked))
}

pub fn uncertainty_bounds(token_scores: &[f64], k_bound: usize) -> Result<UncertaintyBounds> {
    if token_scores.is_empty() {
        return Err(Error::Data("cannot bound an empty score list".into()));
    }
    if k_bound == 0 {
        return Err(Error::Config("k_bound must be >= 1".into()));
    }
    let lower = mean_at(token_scores, &smallest_indices(token_scores, k_bound));
    let upper = mean_at(token_scores, &largest_indices(token_scores, k_bound));
    Ok(UncertaintyBounds { lower, upper, k_bound })
}

/// Indices of the `k` smallest values (all of them if `k >= len`); equal
/// values keep ascending index order.
pub fn smallest_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

/// Indices of the `k` largest values, largest first; ties by ascending index.
pub fn largest_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

fn mean_at(values: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(values: &[f64]) -> EvidenceVector {
        EvidenceVector::new(values.to_vec(), EvidenceTransform::Relu).unwrap()
    }

    #[test]
    fn transforms() {
        let relu = evidence_from_logits(&[3.0, -1.0], EvidenceTransform::Relu).unwrap();
        assert_eq!(relu.values(), &[3.0, 0.0]);
        let shifted = evidence_from_logits(&[3.0, -1.0], EvidenceTransform::ShiftMin).unwrap();
        assert_eq!(shifted.values(), &[4.0, 0.0]);
        let zeros = evidence_from_logits(&[0.0, 0.0, 0.0], EvidenceTransform::Relu).unwrap();
        assert_eq!(zeros.values(), &[0.0, 0.0, 0.0]);
        let sp = evidence_from_logits(&[0.0, 800.0, -800.0], EvidenceTransform::Softplus).unwrap();
        assert!((sp.values()[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(sp.values()[1], 800.0);
        assert!(sp.values()[2] >= 0.0);
    }

    #[test]
    fn evidence_shape_and_data_errors() {
        assert!(matches!(
            evidence_from_logits(&[1.0], EvidenceTransform::Relu),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            evidence_from_logits(&[1.0, f64::NAN], EvidenceTransform::Relu),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            evidence_from_logits(&[1.0, f64::INFINITY], EvidenceTransform::ShiftMin),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn aleatoric_closed_forms() {
        assert!((aleatoric_uncertainty(&ev(&[1.0, 1.0])) - 0.5).abs() < 1e-12);
        assert!((aleatoric_uncertainty(&ev(&[3.0, 1.0])) - 11.0 / 24.0).abs() < 1e-12);
        let degenerate = aleatoric_uncertainty(&ev(&[0.0; 4]));
        assert!((degenerate - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn alpha_variant_uses_shifted_concentrations() {
        // α = (1, 1): -Σ ½(ψ(2) - ψ(3)) = ½.
        let au = aleatoric_uncertainty_with(&ev(&[0.0, 0.0]), AuVariant::Alpha);
        assert!((au - 0.5).abs() < 1e-12);
    }

    #[test]
    fn epistemic_closed_forms() {
        assert_eq!(epistemic_uncertainty(&ev(&[0.0, 0.0])), 1.0);
        assert_eq!(epistemic_uncertainty(&ev(&[1.0, 1.0])), 0.5);
        assert!((epistemic_uncertainty(&ev(&[9.0; 10])) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn reliability_products() {
        assert_eq!(token_reliability(0.5, 0.5), -0.25);
        assert_eq!(token_reliability(0.0, 0.3), 0.0);
        assert!((token_reliability(4f64.ln(), 1.0) + 1.386294).abs() < 1e-6);
    }

    #[test]
    fn logprob_mean() {
        assert_eq!(score_response_logprob(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(score_response_logprob(&[-1.0, -2.0, -3.0]).unwrap(), -2.0);
        assert_eq!(score_response_logprob(&[-0.7]).unwrap(), -0.7);
        assert!(matches!(score_response_logprob::<f64>(&[]), Err(Error::Data(_))));
    }

    #[test]
    fn logtoku_aggregation() {
        let r = [-0.1, -0.5, -0.3];
        assert!((score_response_logtoku(&r, 2).unwrap() + 0.4).abs() < 1e-15);
        let all = score_response_logtoku(&r, 10).unwrap();
        assert!((all - (-0.9 / 3.0)).abs() < 1e-15);
        assert!((score_response_logtoku(&[-0.2; 7], 3).unwrap() + 0.2).abs() < 1e-15);
        assert!(matches!(score_response_logtoku(&[], 10), Err(Error::Data(_))));
    }

    #[test]
    fn bounds() {
        let b = uncertainty_bounds(&[0.1, 0.2, 0.3, 0.4], 2).unwrap();
        assert!((b.lower - 0.15).abs() < 1e-15);
        assert!((b.upper - 0.35).abs() < 1e-15);
        let c = uncertainty_bounds(&[0.7; 5], 3).unwrap();
        assert_eq!(c.lower, c.upper);
        let one = uncertainty_bounds(&[0.42], 10).unwrap();
        assert_eq!((one.lower, one.upper), (0.42, 0.42));
        assert!(matches!(uncertainty_bounds(&[], 2), Err(Error::Data(_))));
    }

    #[test]
    fn ties_break_by_index() {
        let v = [0.2, 0.1, 0.1, 0.3, 0.3];
        assert_eq!(smallest_indices(&v, 2), vec![1, 2]);
        assert_eq!(largest_indices(&v, 3), vec![3, 4, 0]);
    }

    #[test]
    fn score_token_respects_k_evidence() {
        let row = [4.0f32, 2.0, 1.0, -3.0];
        let s = score_token(&row, 2, EvidenceTransform::Relu, AuVariant::Evidence, -0.1).unwrap();
        assert!((s.eu - 2.0 / 8.0).abs() < 1e-15);
        assert_eq!(s.reliability, -(s.au * s.eu));
        assert!(score_token(&row, 5, EvidenceTransform::Relu, AuVariant::Evidence, 0.0).is_err());
    }
}
