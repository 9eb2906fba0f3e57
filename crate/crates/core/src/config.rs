//! Run configuration: defaults, the `key = value` file format and overrides.
//!
//! Values are resolved in increasing priority: built-in defaults, config
//! file, `EVPROBE_OUTPUT_DIR`, command-line flags. Every output file starts
//! with an echo of the resolved configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::behavior::{BandwidthRule, Pooling, RegimeThresholds, TransitionSpec, DEFAULT_TAU_C, DEFAULT_TAU_E};
use crate::error::{Error, Result};
use crate::evidential::{AuVariant, EvidenceTransform, DEFAULT_K_AGG, DEFAULT_K_BOUND, DEFAULT_K_EVIDENCE};
use crate::probe::{SweepSelection, TrainHyper, DEFAULT_L2, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::scoring::{ScoreKind, ScoringConfig, TokenMeasure};
use crate::trace::{Condition, DatasetManifest, DEFAULT_THETA};

pub const OUTPUT_DIR_ENV: &str = "EVPROBE_OUTPUT_DIR";

/// Number of trailing stored layers swept when no layers are given.
pub const DEFAULT_SWEEP_LAYERS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub k_evidence: usize,
    pub transform: EvidenceTransform,
    pub au_variant: AuVariant,
    pub k_agg: usize,
    pub k_bound: usize,
    pub tau_c: f64,
    pub tau_e: f64,
    pub theta: f64,
    pub score: ScoreKind,
    pub pooling: Pooling,
    pub bandwidth: BandwidthRule,
    pub transitions: Vec<TransitionSpec>,
    /// Empty means the last [`DEFAULT_SWEEP_LAYERS`] stored layers.
    pub layers: Vec<u32>,
    pub selections: Vec<SweepSelection>,
    pub rank_by: TokenMeasure,
    /// Conditions whose responses feed the probes; empty means all.
    pub probe_conditions: Vec<Condition>,
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub split_seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k_evidence: DEFAULT_K_EVIDENCE,
            transform: EvidenceTransform::Relu,
            au_variant: AuVariant::Evidence,
            k_agg: DEFAULT_K_AGG,
            k_bound: DEFAULT_K_BOUND,
            tau_c: DEFAULT_TAU_C,
            tau_e: DEFAULT_TAU_E,
            theta: DEFAULT_THETA,
            score: ScoreKind::default(),
            pooling: Pooling::default(),
            bandwidth: BandwidthRule::Silverman,
            transitions: TransitionSpec::defaults(),
            layers: Vec::new(),
            selections: SweepSelection::defaults(),
            rank_by: TokenMeasure::Eu,
            probe_conditions: Vec::new(),
            l2: DEFAULT_L2,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            split_seed: 0,
            output_dir: PathBuf::from("."),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_layers(value: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match part.split_once("..=") {
            Some((a, b)) => {
                let (a, b): (u32, u32) = (parse("layers", a)?, parse("layers", b)?);
                if a > b {
                    return Err(Error::Config(format!("layers: empty range {part}")));
                }
                out.extend(a..=b);
            }
            None => out.push(parse("layers", part)?),
        }
    }
    Ok(out)
}

fn parse_bandwidth(value: &str) -> Result<BandwidthRule> {
    if value == "silverman" {
        return Ok(BandwidthRule::Silverman);
    }
    let h: f64 = parse("bandwidth", value)?;
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::Config(format!("bandwidth must be silverman or a positive number, got {value}")));
    }
    Ok(BandwidthRule::Fixed(h))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Names accepted by [`RunConfig::set`], in echo order.
    pub const KEYS: &'static [&'static str] = &[
        "k_evidence",
        "transform",
        "au_variant",
        "k_agg",
        "k_bound",
        "tau_c",
        "tau_e",
        "theta",
        "score",
        "pooling",
        "bandwidth",
        "transitions",
        "layers",
        "selections",
        "rank_by",
        "probe_conditions",
        "l2",
        "max_iter",
        "tol",
        "split_seed",
        "output_dir",
    ];

    /// Sets one key from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "k_evidence" => self.k_evidence = parse(key, value)?,
            "transform" => self.transform = parse(key, value)?,
            "au_variant" => self.au_variant = parse(key, value)?,
            "k_agg" => self.k_agg = parse(key, value)?,
            "k_bound" => self.k_bound = parse(key, value)?,
            "tau_c" => self.tau_c = parse(key, value)?,
            "tau_e" => self.tau_e = parse(key, value)?,
            "theta" => self.theta = parse(key, value)?,
            "score" => self.score = parse(key, value)?,
            "pooling" => self.pooling = parse(key, value)?,
            "bandwidth" => self.bandwidth = parse_bandwidth(value)?,
            "transitions" => self.transitions = parse_list(key, value)?,
            "layers" => self.layers = parse_layers(value)?,
            "selections" => self.selections = parse_list(key, value)?,
            "rank_by" => self.rank_by = parse(key, value)?,
            "probe_conditions" => self.probe_conditions = parse_list(key, value)?,
            "l2" => self.l2 = parse(key, value)?,
            "max_iter" => self.max_iter = parse(key, value)?,
            "tol" => self.tol = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "k_evidence" => self.k_evidence.to_string(),
            "transform" => self.transform.to_string(),
            "au_variant" => self.au_variant.as_str().to_owned(),
            "k_agg" => self.k_agg.to_string(),
            "k_bound" => self.k_bound.to_string(),
            "tau_c" => self.tau_c.to_string(),
            "tau_e" => self.tau_e.to_string(),
            "theta" => self.theta.to_string(),
            "score" => self.score.to_string(),
            "pooling" => self.pooling.as_str().to_owned(),
            "bandwidth" => match self.bandwidth {
                BandwidthRule::Silverman => "silverman".to_owned(),
                BandwidthRule::Fixed(h) => h.to_string(),
            },
            "transitions" => join(&self.transitions),
            "layers" => join(&self.layers),
            "selections" => join(&self.selections),
            "rank_by" => self.rank_by.as_str().to_owned(),
            "probe_conditions" => join(&self.probe_conditions),
            "l2" => self.l2.to_string(),
            "max_iter" => self.max_iter.to_string(),
            "tol" => self.tol.to_string(),
            "split_seed" => self.split_seed.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            _ => return None,
        };
        Some(v)
    }

    pub fn validate(&self) -> Result<()> {
        RegimeThresholds::new(self.tau_c, self.tau_e)?;
        if self.k_evidence < 2 {
            return Err(Error::Config(format!("k_evidence must be >= 2, got {}", self.k_evidence)));
        }
        if self.k_agg == 0 || self.k_bound == 0 {
            return Err(Error::Config("k_agg and k_bound must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta must lie in [0, 1], got {}", self.theta)));
        }
        if self.selections.is_empty() {
            return Err(Error::Config("no selections given".into()));
        }
        self.hyper().validate()
    }

    /// Checks settings that depend on the dataset.
    pub fn validate_for(&self, manifest: &DatasetManifest) -> Result<()> {
        self.validate()?;
        if self.k_evidence > manifest.k_store {
            return Err(Error::Config(format!(
                "k_evidence {} exceeds the stored top-k width {}",
                self.k_evidence, manifest.k_store
            )));
        }
        if let Some(l) = self.layers.iter().find(|l| !manifest.layer_indices.contains(l)) {
            return Err(Error::Config(format!("layer {l} is not stored in the dataset")));
        }
        Ok(())
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            k_evidence: self.k_evidence,
            transform: self.transform,
            au_variant: self.au_variant,
            k_agg: self.k_agg,
            k_bound: self.k_bound,
        }
    }

    pub fn thresholds(&self) -> Result<RegimeThresholds> {
        RegimeThresholds::new(self.tau_c, self.tau_e)
    }

    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            l2: self.l2,
            max_iter: self.max_iter,
            tol: self.tol,
            split_seed: self.split_seed,
        }
    }

    /// Explicit layers, or the last stored ones.
    pub fn sweep_layers(&self, manifest: &DatasetManifest) -> Vec<u32> {
        if !self.layers.is_empty() {
            return self.layers.clone();
        }
        let stored = &manifest.layer_indices;
        stored[stored.len().saturating_sub(DEFAULT_SWEEP_LAYERS)..].to_vec()
    }

    /// The configuration in file syntax; reloading it gives the same config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    /// Header record for JSONL outputs.
    pub fn echo_json(&self, command: &str) -> Value {
        let mut cfg = Map::new();
        for key in Self::KEYS {
            cfg.insert((*key).to_owned(), Value::String(self.get(key).unwrap_or_default()));
        }
        let mut root = Map::new();
        root.insert("command".into(), Value::String(command.to_owned()));
        root.insert("config".into(), Value::Object(cfg));
        Value::Object(root)
    }

    /// Header comment block for CSV outputs.
    pub fn echo_comments(&self, command: &str) -> String {
        let mut out = format!("# command = {command}\n");
        for line in self.to_text().lines() {
            let _ = writeln!(out, "# {line}");
        }
        out
    }
}
