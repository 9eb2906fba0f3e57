//! Synthetic datasets with known structure, for testing and demos.
//!
//! [`planted_signal`] hides the correctness label along one direction of
//! one layer's hidden states. [`behavior_dataset`] fixes per-question
//! correctness ratios and per-condition uncertainty levels so regimes and
//! transitions are known in advance.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::trace::{
    labels_path_for, write_labels, Condition, DatasetManifest, DatasetWriter, GenerationTrace, JudgeKind, LabelRecord, LabelSet, Matrix,
    TraceKey,
};

const VOCAB: u32 = 32_000;

/// Where the planted signal lives inside a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalTokens {
    /// Only the final token.
    Eos,
    /// The final token plus the highest-EU non-final tokens.
    EosAndHighEu(usize),
    /// Only the highest-EU non-final tokens.
    HighEu(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSignalConfig {
    pub n_questions: usize,
    pub samples_per_question: usize,
    pub layers: Vec<u32>,
    pub hidden_dim: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub k_store: usize,
    pub signal_layer: u32,
    /// Class means sit at `±snr` noise standard deviations along the signal direction.
    pub snr: f64,
    pub tokens: SignalTokens,
    pub seed: u64,
}

impl Default for PlantedSignalConfig {
    fn default() -> Self {
        Self {
            n_questions: 100,
            samples_per_question: 5,
            layers: (1..=20).collect(),
            hidden_dim: 64,
            min_tokens: 8,
            max_tokens: 20,
            k_store: 20,
            signal_layer: 12,
            snr: 2.0,
            tokens: SignalTokens::EosAndHighEu(5),
            seed: 0,
        }
    }
}

impl PlantedSignalConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.layers.contains(&self.signal_layer) {
            return Err(Error::Config(format!("signal layer {} is not generated", self.signal_layer)));
        }
        if self.min_tokens < 2 || self.min_tokens > self.max_tokens {
            return Err(Error::Config("token counts must satisfy 2 <= min <= max".into()));
        }
        if let SignalTokens::EosAndHighEu(k) | SignalTokens::HighEu(k) = self.tokens {
            if k == 0 || k + 1 > self.min_tokens {
                return Err(Error::Config(format!("{k} high-EU tokens do not fit in {} tokens", self.min_tokens)));
            }
        }
        if self.k_store < 2 || self.hidden_dim == 0 || self.samples_per_question == 0 {
            return Err(Error::Config("k_store >= 2, hidden_dim >= 1 and samples >= 1 are required".into()));
        }
        Ok(())
    }
}

/// Generated traces with their labels.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub traces: Vec<GenerationTrace>,
    pub labels: LabelSet,
}

impl SyntheticDataset {
    /// Writes the dataset and its sidecar label file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut writer = DatasetWriter::create(path, self.manifest.clone())?;
        for t in &self.traces {
            writer.append(t)?;
        }
        writer.finish()?;
        write_labels(labels_path_for(path), &self.labels)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Descending top-K row whose relu evidence sums to `scale · Σ profile`.
fn logit_row(scale: f64, k: usize) -> Vec<f32> {
    (0..k).map(|j| (scale * (1.0 - j as f64 / k as f64)) as f32).collect()
}

fn topk_ids(rng: &mut ChaCha8Rng, chosen: u32, k: usize) -> Vec<u32> {
    let mut ids = vec![chosen];
    while ids.len() < k {
        let id = rng.gen_range(0..VOCAB);
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    ids
}

/// Unit vector of dimension `d`.
fn direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Response-level label encoded linearly in one layer; every other layer is
/// pure `N(0, I)` noise.
///
/// Token confidences are distinct per token, so the epistemic ranking of
/// tokens is fixed by construction: a smaller confidence means a larger EU.
/// The final token is always the most confident. The final token carries a
/// `±snr` offset and each of the `k` highest-EU tokens carries `±snr/√k`, so
/// the noise-scaled offset of their average is again `snr`.
pub fn planted_signal(cfg: &PlantedSignalConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.hidden_dim;
    let u = direction(&mut rng, d);
    let mut manifest = DatasetManifest::new("synthetic-planted", cfg.k_store, cfg.layers.clone(), d);
    manifest.m_samples = cfg.samples_per_question;
    manifest.metadata.insert("generator".into(), "planted-signal".into());
    manifest.metadata.insert("seed".into(), cfg.seed.to_string());
    manifest.metadata.insert("signal_layer".into(), cfg.signal_layer.to_string());
    manifest.metadata.insert("snr".into(), cfg.snr.to_string());

    let mut traces = Vec::new();
    let mut labels = LabelSet::new();
    for q in 0..cfg.n_questions {
        let qid = format!("q{q:04}");
        for s in 0..cfg.samples_per_question {
            let t = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
            let z: u8 = rng.gen_range(0..=1);
            let sign = if z == 1 { 1.0 } else { -1.0 };

            // distinct confidences for non-final tokens; final token most confident
            let mut conf: Vec<f64> = (0..t - 1).map(|i| 1.0 + i as f64).collect();
            conf.shuffle(&mut rng);
            conf.push(t as f64 + 4.0);

            let ids: Vec<u32> = (0..t).map(|_| rng.gen_range(0..VOCAB)).collect();
            let mut logits = Vec::with_capacity(t * cfg.k_store);
            let mut top_ids = Vec::with_capacity(t * cfg.k_store);
            for (i, &c) in conf.iter().enumerate() {
                logits.extend(logit_row(c, cfg.k_store));
                top_ids.extend(topk_ids(&mut rng, ids[i], cfg.k_store));
            }
            let chosen_logprobs: Vec<f32> = conf.iter().map(|c| (-1.0 / c) as f32).collect();

            let mut planted: Vec<(usize, f64)> = Vec::new();
            if !matches!(cfg.tokens, SignalTokens::HighEu(_)) {
                planted.push((t - 1, cfg.snr));
            }
            if let SignalTokens::EosAndHighEu(k) | SignalTokens::HighEu(k) = cfg.tokens {
                let mut order: Vec<usize> = (0..t - 1).collect();
                order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]));
                let amp = cfg.snr / (k as f64).sqrt();
                planted.extend(order.into_iter().take(k).map(|i| (i, amp)));
            }

            let mut hidden = BTreeMap::new();
            for &layer in &cfg.layers {
                let mut m = Matrix::zeros(t, d);
                for r in 0..t {
                    for x in m.row_mut(r) {
                        *x = normal(&mut rng) as f32;
                    }
                }
                if layer == cfg.signal_layer {
                    for &(r, amp) in &planted {
                        for (x, ui) in m.row_mut(r).iter_mut().zip(&u) {
                            *x += (sign * amp * ui) as f32;
                        }
                    }
                }
                hidden.insert(layer, m);
            }

            let span_len = rng.gen_range(1..=3.min(t - 1));
            let span_start = rng.gen_range(0..t - span_len);
            let p_true = (0.5 + 0.2 * sign + 0.1 * normal(&mut rng)).clamp(0.0, 1.0);
            traces.push(GenerationTrace {
                question_id: qid.clone(),
                condition: Condition::Woc,
                sample_index: s as u32,
                response_token_ids: ids,
                chosen_logprobs,
                topk_token_ids: top_ids,
                topk_logits: Matrix::new(t, cfg.k_store, logits)?,
                hidden_states: hidden,
                p_true: Some(p_true),
                response_text: format!("synthetic response {s} to {qid}"),
            });
            labels.insert(LabelRecord {
                question_id: qid.clone(),
                condition: Condition::Woc,
                sample_index: s as u32,
                z,
                exact_answer_span: Some([span_start as u32, (span_start + span_len) as u32]),
                judge: JudgeKind::Llm,
                flagged: false,
            })?;
        }
    }
    Ok(SyntheticDataset { manifest, traces, labels })
}

/// Correct-response count and token EU level of one (question, condition).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantedCondition {
    pub n_correct: usize,
    pub eu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedQuestion {
    pub question_id: String,
    pub conditions: BTreeMap<Condition, PlantedCondition>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorPlan {
    pub samples_per_question: usize,
    /// Per-response jitter (standard deviation) around the planted EU level.
    pub eu_jitter: f64,
    pub questions: Vec<PlantedQuestion>,
}

impl BehaviorPlan {
    /// Question groups with known regimes under the default thresholds:
    ///
    /// * `rescued-*`: WOC r = 0.2 (E), WCC r = 0.8 (C), WIC r = 0.5 (MID)
    /// * `misled-*`: WOC r = 0.8 (C), WCC r = 1.0 (C), WIC r = 0.1 (E)
    /// * `stable-*`: every condition r = 1.0 (C)
    /// * `mid-*`: WOC r = 0.5 (MID), WCC r = 0.9 (C), WIC r = 0.0 (E)
    /// * `partial-*`: WOC r = 0.0 (E), no WCC trace, WIC r = 0.0 (E)
    ///
    /// The transition start sides carry EU `from_eu`, their end sides `to_eu`;
    /// everything else sits at 0.35.
    pub fn standard(per_group: usize, from_eu: f64, to_eu: f64) -> Self {
        let m = 10;
        let c = |n_correct: usize, eu: f64| PlantedCondition { n_correct, eu };
        let mut questions = Vec::new();
        for i in 0..per_group {
            let mut add = |name: &str, conds: Vec<(Condition, PlantedCondition)>| {
                questions.push(PlantedQuestion {
                    question_id: format!("{name}-{i:03}"),
                    conditions: conds.into_iter().collect(),
                })
            };
            add(
                "rescued",
                vec![(Condition::Woc, c(2, from_eu)), (Condition::Wcc, c(8, to_eu)), (Condition::Wic, c(5, 0.35))],
            );
            add(
                "misled",
                vec![(Condition::Woc, c(8, from_eu)), (Condition::Wcc, c(10, 0.35)), (Condition::Wic, c(1, to_eu))],
            );
            add(
                "stable",
                vec![(Condition::Woc, c(10, 0.35)), (Condition::Wcc, c(10, 0.35)), (Condition::Wic, c(10, 0.35))],
            );
            add(
                "mid",
                vec![(Condition::Woc, c(5, 0.35)), (Condition::Wcc, c(9, 0.35)), (Condition::Wic, c(0, 0.35))],
            );
            add("partial", vec![(Condition::Woc, c(0, 0.35)), (Condition::Wic, c(0, 0.35))]);
        }
        Self {
            samples_per_question: m,
            eu_jitter: 0.02,
            questions,
        }
    }
}

/// One trace per planted response. Every token of a response shares the
/// same top-K row, chosen so its epistemic uncertainty (relu evidence,
/// `k_evidence` ≤ `k_store`) equals the response's EU draw.
pub fn behavior_dataset(plan: &BehaviorPlan, k_evidence: usize, k_store: usize, seed: u64) -> Result<SyntheticDataset> {
    if k_evidence < 2 || k_evidence > k_store {
        return Err(Error::Config(format!("need 2 <= k_evidence ({k_evidence}) <= k_store ({k_store})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 4;
    let layers = vec![0];
    let mut manifest = DatasetManifest::new("synthetic-behavior", k_store, layers.clone(), d);
    manifest.m_samples = plan.samples_per_question;
    manifest.metadata.insert("generator".into(), "behavior".into());
    manifest.metadata.insert("seed".into(), seed.to_string());

    let mut traces = Vec::new();
    let mut labels = LabelSet::new();
    for q in &plan.questions {
        for (&cond, pc) in &q.conditions {
            if pc.n_correct > plan.samples_per_question {
                return Err(Error::Config(format!("{}: more correct responses than samples", q.question_id)));
            }
            let mut zs: Vec<u8> = (0..plan.samples_per_question).map(|i| u8::from(i < pc.n_correct)).collect();
            zs.shuffle(&mut rng);
            for (s, &z) in zs.iter().enumerate() {
                let eu = (pc.eu + plan.eu_jitter * normal(&mut rng)).clamp(0.01, 0.99);
                // EU = K / (K + K·v) for K equal logits v
                let v = (1.0 / eu - 1.0) as f32;
                let mut row = vec![v; k_evidence];
                row.resize(k_store, 0.0);
                let t = rng.gen_range(3..=6);
                let ids: Vec<u32> = (0..t).map(|_| rng.gen_range(0..VOCAB)).collect();
                let mut top_ids = Vec::new();
                let mut logits = Vec::new();
                for &id in &ids {
                    top_ids.extend(topk_ids(&mut rng, id, k_store));
                    logits.extend(&row);
                }
                let mut hidden = BTreeMap::new();
                hidden.insert(0, Matrix::zeros(t, d));
                let key = TraceKey::new(q.question_id.clone(), cond, s as u32);
                traces.push(GenerationTrace {
                    question_id: key.question_id.clone(),
                    condition: cond,
                    sample_index: key.sample_index,
                    response_token_ids: ids,
                    chosen_logprobs: vec![-0.1; t],
                    topk_token_ids: top_ids,
                    topk_logits: Matrix::new(t, k_store, logits)?,
                    hidden_states: hidden,
                    p_true: None,
                    response_text: String::new(),
                });
                labels.insert(LabelRecord {
                    question_id: key.question_id,
                    condition: cond,
                    sample_index: key.sample_index,
                    z,
                    exact_answer_span: None,
                    judge: JudgeKind::ExactMatch,
                    flagged: false,
                })?;
            }
        }
    }
    Ok(SyntheticDataset { manifest, traces, labels })
}
