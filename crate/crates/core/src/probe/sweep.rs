//! Layer × token-selection sweep of probes and the response-score baselines.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::logistic::{fit_probe, stratified_split, train_test_split, FeatureMatrix, LinearProbe, TrainHyper, MIN_SAMPLES};
use super::metrics::auroc;
use super::selection::{build_feature, select_tokens, AvgSubset, TokenSelection};
use crate::error::{Error, Result};
use crate::scoring::{score_trace, ResponseScores, ScoringConfig, TokenMeasure};
use crate::trace::{Condition, DatasetReader, GenerationTrace, LabelRecord, LabelSet};

/// Seed offset for the inner validation split used to pick the best average.
const INNER_SPLIT_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// A labeled response ready for probing.
#[derive(Debug, Clone)]
pub struct ProbeSample {
    pub trace: GenerationTrace,
    pub label: LabelRecord,
    /// Per-token uncertainty used to rank tokens.
    pub token_uncertainty: Vec<f64>,
    pub scores: ResponseScores,
}

impl ProbeSample {
    pub fn new(trace: GenerationTrace, label: LabelRecord, scoring: &ScoringConfig, rank_by: TokenMeasure) -> Result<Self> {
        label.validate_span(trace.len())?;
        let scores = score_trace(&trace, scoring)?;
        let token_uncertainty = scores.token_measure(rank_by);
        Ok(Self {
            trace,
            label,
            token_uncertainty,
            scores,
        })
    }

    pub fn is_correct(&self) -> bool {
        self.label.is_correct()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ProbeDataset {
    pub samples: Vec<ProbeSample>,
    /// Traces without a label (left out).
    pub unlabeled: usize,
}

impl ProbeDataset {
    /// Loads every labeled trace, optionally restricted to some conditions.
    pub fn load(
        reader: &DatasetReader,
        labels: &LabelSet,
        scoring: &ScoringConfig,
        rank_by: TokenMeasure,
        conditions: &[Condition],
    ) -> Result<Self> {
        let mut data = ProbeDataset::default();
        for entry in reader.entries() {
            if !conditions.is_empty() && !conditions.contains(&entry.condition) {
                continue;
            }
            let Some(label) = labels.get(&entry.key()) else {
                data.unlabeled += 1;
                continue;
            };
            let trace = reader.read_entry(entry)?;
            data.samples.push(ProbeSample::new(trace, label.clone(), scoring, rank_by)?);
        }
        Ok(data)
    }

    pub fn labels(&self) -> Vec<bool> {
        self.samples.iter().map(ProbeSample::is_correct).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// A sweep column: a fixed selection or the best averaged subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SweepSelection {
    Fixed(TokenSelection),
    /// Best of the averaging candidates, chosen on an inner validation split.
    AvgBest,
}

impl SweepSelection {
    pub fn method(&self) -> &'static str {
        match self {
            SweepSelection::Fixed(s) => s.method(),
            SweepSelection::AvgBest => "Probe(AVG)",
        }
    }

    /// EOS, EXACT, EU1..EU5, EU-1..EU-5 and the best average.
    pub fn defaults() -> Vec<SweepSelection> {
        let mut out = vec![
            SweepSelection::Fixed(TokenSelection::Eos),
            SweepSelection::Fixed(TokenSelection::Exact),
        ];
        out.extend(TokenSelection::ranks().into_iter().map(SweepSelection::Fixed));
        out.push(SweepSelection::AvgBest);
        out
    }
}

impl fmt::Display for SweepSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepSelection::Fixed(s) => s.fmt(f),
            SweepSelection::AvgBest => f.write_str("AVG"),
        }
    }
}

impl FromStr for SweepSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("AVG") {
            Ok(SweepSelection::AvgBest)
        } else {
            Ok(SweepSelection::Fixed(s.parse()?))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub layers: Vec<u32>,
    pub selections: Vec<SweepSelection>,
    pub hyper: TrainHyper,
    pub avg_candidates: Vec<AvgSubset>,
}

impl SweepConfig {
    pub fn new(layers: Vec<u32>, selections: Vec<SweepSelection>, hyper: TrainHyper) -> Self {
        Self {
            layers,
            selections,
            hyper,
            avg_candidates: AvgSubset::candidates(),
        }
    }
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selection: Option<String>,
    /// Averaged subset picked on inner validation for `AVG`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen: Option<String>,
    pub auroc: Option<f64>,
    pub n_test: usize,
    pub split_seed: u64,
    /// Samples dropped for this cell (no span, no P(True), ...).
    pub skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub best: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Flags the highest-AUROC row of every method (first wins ties).
    pub fn mark_best(&mut self) {
        let mut best: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
        for (i, row) in self.rows.iter().enumerate() {
            if let Some(a) = row.auroc {
                let e = best.entry(&row.method).or_insert((i, a));
                if a > e.1 {
                    *e = (i, a);
                }
            }
        }
        let winners: Vec<usize> = best.values().map(|(i, _)| *i).collect();
        for (i, row) in self.rows.iter_mut().enumerate() {
            row.best = winners.contains(&i);
        }
    }

    pub fn best(&self, method: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.best && r.method == method)
    }

    pub fn cell(&self, layer: u32, selection: &str) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.layer == Some(layer) && r.selection.as_deref() == Some(selection))
    }
}

/// Trained probe for one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub layer_index: u32,
    pub selection: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen: Option<String>,
    #[serde(flatten)]
    pub probe: LinearProbe,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    pub report: EvalReport,
    /// Probes of every successful cell, in report order.
    pub models: Vec<ProbeModel>,
}

struct CellResult {
    row: EvalRow,
    model: Option<ProbeModel>,
}

/// Features of every sample that admits `selection` at `layer`.
fn cell_features(data: &ProbeDataset, layer: u32, selection: TokenSelection) -> Result<(Vec<Vec<f64>>, Vec<bool>, usize)> {
    let mut rows = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    let mut skipped = 0;
    for s in &data.samples {
        match select_tokens(&s.trace, &s.token_uncertainty, selection, Some(&s.label)) {
            Ok(idx) => {
                rows.push(build_feature(&s.trace, layer, &idx)?);
                labels.push(s.is_correct());
            }
            Err(Error::Selection(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((rows, labels, skipped))
}

fn check_size(n: usize) -> Result<()> {
    if n < MIN_SAMPLES {
        return Err(Error::Data(format!("only {n} usable samples, need {MIN_SAMPLES}")));
    }
    Ok(())
}

/// The skip count is reported even when the cell fails.
fn run_fixed(data: &ProbeDataset, layer: u32, selection: TokenSelection, hyper: &TrainHyper) -> (Result<(LinearProbe, f64, usize)>, usize) {
    let (rows, labels, skipped) = match cell_features(data, layer, selection) {
        Ok(f) => f,
        Err(e) => return (Err(e), 0),
    };
    let fit = || {
        check_size(rows.len())?;
        let x = FeatureMatrix::from_rows(&rows)?;
        let split = train_test_split(&labels, hyper.split_seed);
        let probe = fit_probe(&x, &labels, &split.train, hyper)?;
        let a = probe.auroc_on(&x, &labels, &split.test)?;
        Ok((probe, a, split.test.len()))
    };
    (fit(), skipped)
}

fn run_avg_best(
    data: &ProbeDataset,
    layer: u32,
    candidates: &[AvgSubset],
    hyper: &TrainHyper,
) -> Result<(LinearProbe, f64, usize, usize, AvgSubset)> {
    if candidates.is_empty() {
        return Err(Error::Config("no averaging candidates".into()));
    }
    let features = candidates
        .iter()
        .map(|&c| {
            let (rows, labels, skipped) = cell_features(data, layer, TokenSelection::Avg(c))?;
            Ok((FeatureMatrix::from_rows(&rows)?, labels, skipped))
        })
        .collect::<Result<Vec<_>>>()?;
    // Averaged subsets never skip samples, so every candidate shares labels.
    let (_, labels, skipped) = &features[0];
    check_size(labels.len())?;
    let outer = train_test_split(labels, hyper.split_seed);
    let inner = stratified_split(&outer.train, labels, hyper.split_seed ^ INNER_SPLIT_SALT, 1, 5);
    let mut best: Option<(usize, f64)> = None;
    for (ci, (x, _, _)) in features.iter().enumerate() {
        let Ok(probe) = fit_probe(x, labels, &inner.train, hyper) else {
            continue;
        };
        let Ok(val) = probe.auroc_on(x, labels, &inner.test) else {
            continue;
        };
        if best.is_none_or(|(_, b)| val > b) {
            best = Some((ci, val));
        }
    }
    let (ci, _) = best.ok_or_else(|| Error::Training("no averaging candidate could be validated".into()))?;
    let x = &features[ci].0;
    let probe = fit_probe(x, labels, &outer.train, hyper)?;
    let a = probe.auroc_on(x, labels, &outer.test)?;
    Ok((probe, a, outer.test.len(), *skipped, candidates[ci]))
}

fn run_cell(data: &ProbeDataset, layer: u32, selection: SweepSelection, cfg: &SweepConfig) -> CellResult {
    let mut row = EvalRow {
        method: selection.method().to_owned(),
        layer: Some(layer),
        selection: Some(selection.to_string()),
        chosen: None,
        auroc: None,
        n_test: 0,
        split_seed: cfg.hyper.split_seed,
        skipped: 0,
        error: None,
        best: false,
    };
    let outcome = match selection {
        SweepSelection::Fixed(s) => {
            let (res, k) = run_fixed(data, layer, s, &cfg.hyper);
            row.skipped = k;
            res.map(|(p, a, n)| (p, a, n, k, None))
        }
        SweepSelection::AvgBest => {
            run_avg_best(data, layer, &cfg.avg_candidates, &cfg.hyper).map(|(p, a, n, k, c)| (p, a, n, k, Some(c)))
        }
    };
    match outcome {
        Ok((probe, a, n_test, skipped, chosen)) => {
            row.auroc = Some(a);
            row.n_test = n_test;
            row.skipped = skipped;
            row.chosen = chosen.map(|c| c.to_string());
            let model = ProbeModel {
                layer_index: layer,
                selection: selection.to_string(),
                chosen: row.chosen.clone(),
                probe,
            };
            CellResult { row, model: Some(model) }
        }
        Err(e) => {
            row.error = Some(e.to_string());
            CellResult { row, model: None }
        }
    }
}

/// Trains and evaluates one probe per (layer, selection); failed cells are
/// recorded with their error and the sweep continues.
pub fn layer_sweep(data: &ProbeDataset, cfg: &SweepConfig) -> Result<SweepOutcome> {
    cfg.hyper.validate()?;
    let available = data
        .samples
        .first()
        .map(|s| s.trace.hidden_states.keys().copied().collect::<Vec<_>>())
        .unwrap_or_default();
    if let Some(missing) = cfg.layers.iter().find(|l| !available.contains(l)) {
        return Err(Error::Config(format!("layer {missing} is not stored in the traces (have {available:?})")));
    }
    let cells: Vec<(u32, SweepSelection)> = cfg
        .layers
        .iter()
        .flat_map(|&l| cfg.selections.iter().map(move |&s| (l, s)))
        .collect();
    let results: Vec<CellResult> = cells.par_iter().map(|&(l, s)| run_cell(data, l, s, cfg)).collect();
    let mut outcome = SweepOutcome::default();
    for r in results {
        outcome.report.rows.push(r.row);
        outcome.models.extend(r.model);
    }
    outcome.report.mark_best();
    Ok(outcome)
}

/// Returns the stored P(True) as the response's reliability score.
pub fn score_p_true(trace: &GenerationTrace) -> Result<f64> {
    let p = trace
        .p_true
        .ok_or_else(|| Error::MethodUnavailable(format!("trace {} has no P(True)", trace.key())))?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Data(format!("P(True) {p} outside [0, 1]")));
    }
    Ok(p)
}

/// LogProb, P(True) and LogTokU evaluated on the default test split.
pub fn baseline_rows(data: &ProbeDataset, split_seed: u64) -> Vec<EvalRow> {
    let labels = data.labels();
    let split = train_test_split(&labels, split_seed);
    type Scorer = fn(&ProbeSample) -> Result<f64>;
    let methods: [(&str, Scorer); 3] = [
        ("LogProb", |s| Ok(s.scores.logprob)),
        ("P(True)", |s| score_p_true(&s.trace)),
        ("LogTokU", |s| Ok(s.scores.logtoku)),
    ];
    methods
        .iter()
        .map(|(name, f)| {
            let mut scores = Vec::new();
            let mut y = Vec::new();
            let mut skipped = 0;
            let mut error = None;
            for &i in &split.test {
                match f(&data.samples[i]) {
                    Ok(v) => {
                        scores.push(v);
                        y.push(labels[i]);
                    }
                    Err(Error::MethodUnavailable(_)) => skipped += 1,
                    Err(e) => {
                        error = Some(e.to_string());
                        break;
                    }
                }
            }
            let result = match error {
                Some(e) => Err(e),
                None => auroc(&scores, &y).map_err(|e| e.to_string()),
            };
            EvalRow {
                method: (*name).to_owned(),
                layer: None,
                selection: None,
                chosen: None,
                auroc: result.as_ref().ok().copied(),
                n_test: scores.len(),
                split_seed,
                skipped,
                error: result.err(),
                best: false,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_selection_names() {
        assert_eq!("AVG".parse::<SweepSelection>().unwrap(), SweepSelection::AvgBest);
        assert_eq!(
            "EU-3".parse::<SweepSelection>().unwrap(),
            SweepSelection::Fixed(TokenSelection::UncertaintyRank(-3))
        );
        let names: Vec<String> = SweepSelection::defaults().iter().map(|s| s.to_string()).collect();
        assert_eq!(names.first().unwrap(), "EOS");
        assert_eq!(names.last().unwrap(), "AVG");
        assert_eq!(names.len(), 13);
    }

    #[test]
    fn best_marking() {
        let row = |m: &str, a: Option<f64>| EvalRow {
            method: m.into(),
            layer: Some(1),
            selection: None,
            chosen: None,
            auroc: a,
            n_test: 3,
            split_seed: 0,
            skipped: 0,
            error: None,
            best: false,
        };
        let mut r = EvalReport {
            rows: vec![row("A", Some(0.6)), row("A", Some(0.8)), row("A", Some(0.8)), row("B", None), row("B", Some(0.1))],
        };
        r.mark_best();
        let flags: Vec<bool> = r.rows.iter().map(|r| r.best).collect();
        assert_eq!(flags, vec![false, true, false, false, true]);
    }
}
