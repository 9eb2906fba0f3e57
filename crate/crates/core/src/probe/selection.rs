//! Which generated tokens feed a probe, and how their hidden states become
//! one feature vector.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evidential::{largest_indices, smallest_indices};
use crate::trace::{GenerationTrace, LabelRecord};

/// Largest k for top-k subsets and |j| for single-token ranks.
pub const MAX_RANK: u8 = 5;

/// Token subsets whose hidden states are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AvgSubset {
    /// k lowest-uncertainty tokens.
    Low(u8),
    /// k highest-uncertainty tokens.
    High(u8),
    LowPlusEos(u8),
    HighPlusEos(u8),
    FirstLast,
}

impl AvgSubset {
    /// Every candidate subset searched when selecting the best average.
    pub fn candidates() -> Vec<AvgSubset> {
        let mut out = Vec::new();
        for k in 1..=MAX_RANK {
            out.extend([
                AvgSubset::Low(k),
                AvgSubset::LowPlusEos(k),
                AvgSubset::High(k),
                AvgSubset::HighPlusEos(k),
            ]);
        }
        out.push(AvgSubset::FirstLast);
        out
    }

    fn k(self) -> Option<u8> {
        match self {
            AvgSubset::Low(k) | AvgSubset::High(k) | AvgSubset::LowPlusEos(k) | AvgSubset::HighPlusEos(k) => Some(k),
            AvgSubset::FirstLast => None,
        }
    }
}

impl fmt::Display for AvgSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AvgSubset::Low(k) => write!(f, "eu-low-{k}"),
            AvgSubset::High(k) => write!(f, "eu-high-{k}"),
            AvgSubset::LowPlusEos(k) => write!(f, "eu-low-{k}+eos"),
            AvgSubset::HighPlusEos(k) => write!(f, "eu-high-{k}+eos"),
            AvgSubset::FirstLast => f.write_str("first-last"),
        }
    }
}

impl FromStr for AvgSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "first-last" {
            return Ok(AvgSubset::FirstLast);
        }
        let (body, eos) = match s.strip_suffix("+eos") {
            Some(b) => (b, true),
            None => (s.as_str(), false),
        };
        let parse_k = |k: &str| -> Result<u8> {
            k.parse::<u8>()
                .ok()
                .filter(|k| (1..=MAX_RANK).contains(k))
                .ok_or_else(|| Error::Config(format!("subset size in {s:?} must be 1..={MAX_RANK}")))
        };
        let subset = if let Some(k) = body.strip_prefix("eu-low-") {
            let k = parse_k(k)?;
            if eos {
                AvgSubset::LowPlusEos(k)
            } else {
                AvgSubset::Low(k)
            }
        } else if let Some(k) = body.strip_prefix("eu-high-") {
            let k = parse_k(k)?;
            if eos {
                AvgSubset::HighPlusEos(k)
            } else {
                AvgSubset::High(k)
            }
        } else {
            return Err(Error::Config(format!("unknown averaging subset {s:?}")));
        };
        Ok(subset)
    }
}

/// Token selection strategy of a probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenSelection {
    /// Final generated token.
    Eos,
    /// Tokens of the judge-extracted answer span.
    Exact,
    /// `j > 0`: j-th lowest uncertainty; `j < 0`: |j|-th highest.
    UncertaintyRank(i8),
    Avg(AvgSubset),
}

impl TokenSelection {
    /// Method family used when reporting, e.g. `Probe(EU)`.
    pub fn method(&self) -> &'static str {
        match self {
            TokenSelection::Eos => "Probe(EOS)",
            TokenSelection::Exact => "Probe(Exact)",
            TokenSelection::UncertaintyRank(_) => "Probe(EU)",
            TokenSelection::Avg(_) => "Probe(AVG)",
        }
    }

    /// The ten single-token rank selections EU1..EU5 and EU-1..EU-5.
    pub fn ranks() -> Vec<TokenSelection> {
        let m = MAX_RANK as i8;
        (1..=m).chain((1..=m).map(|j| -j)).map(TokenSelection::UncertaintyRank).collect()
    }
}

impl fmt::Display for TokenSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenSelection::Eos => f.write_str("EOS"),
            TokenSelection::Exact => f.write_str("EXACT"),
            TokenSelection::UncertaintyRank(j) => write!(f, "EU{j}"),
            TokenSelection::Avg(s) => write!(f, "AVG({s})"),
        }
    }
}

impl FromStr for TokenSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let upper = t.to_ascii_uppercase();
        match upper.as_str() {
            "EOS" => return Ok(TokenSelection::Eos),
            "EXACT" => return Ok(TokenSelection::Exact),
            _ => {}
        }
        if let Some(inner) = upper.strip_prefix("AVG(").and_then(|r| r.strip_suffix(')')) {
            return Ok(TokenSelection::Avg(inner.parse()?));
        }
        if let Some(j) = upper.strip_prefix("EU") {
            let j: i8 = j
                .parse()
                .map_err(|_| Error::Config(format!("bad uncertainty rank in {s:?}")))?;
            if j == 0 || j.unsigned_abs() > MAX_RANK {
                return Err(Error::Config(format!("uncertainty rank must be in ±1..={MAX_RANK}, got {j}")));
            }
            return Ok(TokenSelection::UncertaintyRank(j));
        }
        Err(Error::Config(format!("unknown token selection {s:?}")))
    }
}

/// Token indices chosen by `selection` for a response of `n_tokens` tokens.
///
/// `token_uncertainty` ranks tokens for the rank and top-k strategies; ties
/// resolve to the lower index. The result is sorted and free of duplicates,
/// except for single-token ranks which return one index.
pub fn select_indices(
    n_tokens: usize,
    token_uncertainty: &[f64],
    selection: TokenSelection,
    span: Option<[u32; 2]>,
) -> Result<Vec<usize>> {
    if n_tokens == 0 {
        return Err(Error::Selection("response has no tokens".into()));
    }
    if token_uncertainty.len() != n_tokens {
        return Err(Error::Shape(format!(
            "{} uncertainty values for {n_tokens} tokens",
            token_uncertainty.len()
        )));
    }
    let eos = n_tokens - 1;
    let mut idx = match selection {
        TokenSelection::Eos => vec![eos],
        TokenSelection::Exact => {
            let [start, end] = span.ok_or_else(|| Error::Selection("no exact answer span".into()))?;
            let (start, end) = (start as usize, end as usize);
            if start >= end || end > n_tokens {
                return Err(Error::Selection(format!(
                    "span [{start}, {end}) invalid for {n_tokens} tokens"
                )));
            }
            (start..end).collect()
        }
        TokenSelection::UncertaintyRank(j) => {
            let k = usize::from(j.unsigned_abs());
            let ranked = if j > 0 {
                smallest_indices(token_uncertainty, k)
            } else {
                largest_indices(token_uncertainty, k)
            };
            // Ranks past T clamp to the extreme available rank.
            vec![*ranked.last().expect("n_tokens > 0")]
        }
        TokenSelection::Avg(subset) => {
            let mut v = match subset {
                AvgSubset::Low(_) | AvgSubset::LowPlusEos(_) => {
                    smallest_indices(token_uncertainty, usize::from(subset.k().unwrap()))
                }
                AvgSubset::High(_) | AvgSubset::HighPlusEos(_) => {
                    largest_indices(token_uncertainty, usize::from(subset.k().unwrap()))
                }
                AvgSubset::FirstLast => vec![0, eos],
            };
            if matches!(subset, AvgSubset::LowPlusEos(_) | AvgSubset::HighPlusEos(_)) {
                v.push(eos);
            }
            v
        }
    };
    idx.sort_unstable();
    idx.dedup();
    Ok(idx)
}

/// [`select_indices`] over a stored trace and its label.
pub fn select_tokens(
    trace: &GenerationTrace,
    token_uncertainty: &[f64],
    selection: TokenSelection,
    label: Option<&LabelRecord>,
) -> Result<Vec<usize>> {
    let span = label.and_then(|l| l.exact_answer_span);
    select_indices(trace.len(), token_uncertainty, selection, span)
}

/// Mean hidden state over the selected token rows of one layer.
pub fn build_feature(trace: &GenerationTrace, layer_index: u32, indices: &[usize]) -> Result<Vec<f64>> {
    let hidden = trace.layer(layer_index)?;
    let mut idx = indices.to_vec();
    idx.sort_unstable();
    idx.dedup();
    if idx.is_empty() {
        return Err(Error::Selection("no token indices selected".into()));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= hidden.rows()) {
        return Err(Error::Selection(format!("token index {bad} out of range for {} tokens", hidden.rows())));
    }
    let mut feature = vec![0.0f64; hidden.cols()];
    for &i in &idx {
        for (acc, &v) in feature.iter_mut().zip(hidden.row(i)) {
            *acc += f64::from(v);
        }
    }
    let n = idx.len() as f64;
    feature.iter_mut().for_each(|v| *v /= n);
    Ok(feature)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EU: [f64; 4] = [0.3, 0.1, 0.4, 0.2];

    fn sel(s: TokenSelection) -> Vec<usize> {
        select_indices(4, &EU, s, None).unwrap()
    }

    #[test]
    fn rank_selection() {
        assert_eq!(sel(TokenSelection::UncertaintyRank(1)), vec![1]);
        assert_eq!(sel(TokenSelection::UncertaintyRank(-1)), vec![2]);
        assert_eq!(sel(TokenSelection::UncertaintyRank(2)), vec![3]);
        // |j| > T clamps to the extreme rank
        assert_eq!(sel(TokenSelection::UncertaintyRank(5)), vec![2]);
        assert_eq!(sel(TokenSelection::UncertaintyRank(-5)), vec![1]);
    }

    #[test]
    fn averaged_subsets() {
        assert_eq!(sel(TokenSelection::Avg(AvgSubset::LowPlusEos(2))), vec![1, 3]);
        assert_eq!(sel(TokenSelection::Avg(AvgSubset::High(2))), vec![0, 2]);
        assert_eq!(sel(TokenSelection::Avg(AvgSubset::HighPlusEos(1))), vec![2, 3]);
        assert_eq!(sel(TokenSelection::Avg(AvgSubset::FirstLast)), vec![0, 3]);
        assert_eq!(select_indices(1, &[0.5], TokenSelection::Avg(AvgSubset::FirstLast), None).unwrap(), vec![0]);
    }

    #[test]
    fn eos_and_exact() {
        assert_eq!(sel(TokenSelection::Eos), vec![3]);
        assert_eq!(select_indices(4, &EU, TokenSelection::Exact, Some([1, 3])).unwrap(), vec![1, 2]);
        assert!(matches!(
            select_indices(4, &EU, TokenSelection::Exact, None),
            Err(Error::Selection(_))
        ));
        assert!(matches!(
            select_indices(4, &EU, TokenSelection::Exact, Some([2, 9])),
            Err(Error::Selection(_))
        ));
    }

    #[test]
    fn names_round_trip() {
        let mut all = vec![TokenSelection::Eos, TokenSelection::Exact];
        all.extend(TokenSelection::ranks());
        all.extend(AvgSubset::candidates().into_iter().map(TokenSelection::Avg));
        assert_eq!(all.len(), 2 + 10 + 21);
        for s in all {
            assert_eq!(s.to_string().parse::<TokenSelection>().unwrap(), s);
        }
        assert!("EU0".parse::<TokenSelection>().is_err());
        assert!("EU6".parse::<TokenSelection>().is_err());
        assert!("AVG(eu-low-9)".parse::<TokenSelection>().is_err());
    }
}
