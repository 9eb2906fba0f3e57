//! Generation traces and their on-disk dataset format.

mod format;
mod labels;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{DatasetReader, DatasetWriter, IndexEntry, FORMAT_VERSION, MAGIC};
pub use labels::{
    fallback_judgement, fallback_label, labels_path_for, normalize_answer, read_labels, token_f1, write_labels,
    JudgeKind, LabelRecord, LabelSet, DEFAULT_THETA,
};

/// Number of responses sampled per question and condition by default.
pub const DEFAULT_M_SAMPLES: usize = 15;

/// Top logits stored per generated token by default.
pub const DEFAULT_K_STORE: usize = 20;

/// Context condition a response was generated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// No context.
    #[serde(rename = "WOC")]
    Woc,
    /// Correct context.
    #[serde(rename = "WCC")]
    Wcc,
    /// Incorrect (misleading) context.
    #[serde(rename = "WIC")]
    Wic,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Woc, Condition::Wcc, Condition::Wic];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Woc => "WOC",
            Condition::Wcc => "WCC",
            Condition::Wic => "WIC",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Condition::Woc => 0,
            Condition::Wcc => 1,
            Condition::Wic => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Condition::Woc),
            1 => Some(Condition::Wcc),
            2 => Some(Condition::Wic),
            _ => None,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "WOC" => Ok(Condition::Woc),
            "WCC" => Ok(Condition::Wcc),
            "WIC" => Ok(Condition::Wic),
            _ => Err(Error::Config(format!("unknown condition {s:?}"))),
        }
    }
}

/// Identifies one sampled response.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TraceKey {
    pub question_id: String,
    pub condition: Condition,
    pub sample_index: u32,
}

impl TraceKey {
    pub fn new(question_id: impl Into<String>, condition: Condition, sample_index: u32) -> Self {
        Self {
            question_id: question_id.into(),
            condition,
            sample_index,
        }
    }
}

impl fmt::Display for TraceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.question_id, self.condition, self.sample_index)
    }
}

/// Dense row-major `rows × cols` matrix of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// One sampled response with everything analysis needs from the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    pub question_id: String,
    pub condition: Condition,
    pub sample_index: u32,
    pub response_token_ids: Vec<u32>,
    /// Chosen-token log-probabilities under the full-vocabulary softmax.
    pub chosen_logprobs: Vec<f32>,
    /// `T × K_store` token ids matching `topk_logits`.
    pub topk_token_ids: Vec<u32>,
    /// `T × K_store`, each row sorted descending.
    pub topk_logits: Matrix,
    /// Layer index → `T × d` hidden states of the generated tokens.
    pub hidden_states: BTreeMap<u32, Matrix>,
    pub p_true: Option<f64>,
    pub response_text: String,
}

impl GenerationTrace {
    pub fn key(&self) -> TraceKey {
        TraceKey::new(self.question_id.clone(), self.condition, self.sample_index)
    }

    /// Number of generated tokens T.
    pub fn len(&self) -> usize {
        self.response_token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response_token_ids.is_empty()
    }

    pub fn k_store(&self) -> usize {
        self.topk_logits.cols()
    }

    pub fn layer(&self, layer_index: u32) -> Result<&Matrix> {
        self.hidden_states.get(&layer_index).ok_or_else(|| {
            Error::Schema(format!("trace {} has no hidden states for layer {layer_index}", self.key()))
        })
    }

    /// Checks the trace's internal invariants (not the manifest match).
    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let key = self.key();
        if t == 0 {
            return Err(Error::Schema(format!("trace {key} has no tokens")));
        }
        if self.chosen_logprobs.len() != t {
            return Err(Error::Schema(format!(
                "trace {key}: {} log-probs for {t} tokens",
                self.chosen_logprobs.len()
            )));
        }
        if let Some(lp) = self.chosen_logprobs.iter().find(|lp| lp.is_nan() || **lp > 0.0) {
            return Err(Error::Schema(format!("trace {key}: log-prob {lp} is not <= 0")));
        }
        if self.topk_logits.rows() != t {
            return Err(Error::Schema(format!(
                "trace {key}: {} top-K rows for {t} tokens",
                self.topk_logits.rows()
            )));
        }
        if self.topk_token_ids.len() != t * self.k_store() {
            return Err(Error::Schema(format!(
                "trace {key}: {} top-K ids, expected {}",
                self.topk_token_ids.len(),
                t * self.k_store()
            )));
        }
        for r in 0..t {
            let row = self.topk_logits.row(r);
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Schema(format!("trace {key}: non-finite logit in row {r}")));
            }
            if row.windows(2).any(|w| w[0] < w[1]) {
                return Err(Error::Schema(format!("trace {key}: top-K row {r} is not descending")));
            }
        }
        let mut dim = None;
        for (layer, m) in &self.hidden_states {
            if m.rows() != t {
                return Err(Error::Schema(format!(
                    "trace {key}: layer {layer} has {} rows for {t} tokens",
                    m.rows()
                )));
            }
            if *dim.get_or_insert(m.cols()) != m.cols() {
                return Err(Error::Schema(format!(
                    "trace {key}: layer {layer} width {} differs from other layers",
                    m.cols()
                )));
            }
        }
        if let Some(p) = self.p_true {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Schema(format!("trace {key}: p_true {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Dataset-level metadata, stored as JSON at the head of the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub model_name: String,
    pub k_store: usize,
    pub layer_indices: Vec<u32>,
    pub hidden_dim: usize,
    pub m_samples: usize,
    /// Free-form provenance (decoding parameters, extraction job, ...).
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(default)]
    pub traces: Vec<IndexEntry>,
}

impl DatasetManifest {
    pub fn new(model_name: impl Into<String>, k_store: usize, layer_indices: Vec<u32>, hidden_dim: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model_name: model_name.into(),
            k_store,
            layer_indices,
            hidden_dim,
            m_samples: DEFAULT_M_SAMPLES,
            metadata: BTreeMap::new(),
            traces: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_store < 2 {
            return Err(Error::Schema(format!("k_store must be >= 2, got {}", self.k_store)));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Schema("hidden_dim must be positive".into()));
        }
        if self.m_samples == 0 {
            return Err(Error::Schema("m_samples must be positive".into()));
        }
        if self.layer_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Schema(format!(
                "layer_indices must be strictly increasing: {:?}",
                self.layer_indices
            )));
        }
        Ok(())
    }

    /// Checks that a trace's dimensions agree with this manifest.
    pub fn check_trace(&self, trace: &GenerationTrace) -> Result<()> {
        trace.validate()?;
        let key = trace.key();
        if trace.k_store() != self.k_store {
            return Err(Error::Schema(format!(
                "trace {key}: top-K width {} != manifest k_store {}",
                trace.k_store(),
                self.k_store
            )));
        }
        let layers: Vec<u32> = trace.hidden_states.keys().copied().collect();
        if layers != self.layer_indices {
            return Err(Error::Schema(format!(
                "trace {key}: layers {layers:?} != manifest layers {:?}",
                self.layer_indices
            )));
        }
        if let Some(m) = trace.hidden_states.values().find(|m| m.cols() != self.hidden_dim) {
            return Err(Error::Schema(format!(
                "trace {key}: hidden width {} != manifest hidden_dim {}",
                m.cols(),
                self.hidden_dim
            )));
        }
        if trace.sample_index as usize >= self.m_samples {
            return Err(Error::Schema(format!(
                "trace {key}: sample_index outside [0, {})",
                self.m_samples
            )));
        }
        Ok(())
    }
}
