//! L2-regularized logistic regression probes.
//!
//! Features are standardized with statistics from the training rows only.
//! The objective
//!
//! ```text
//! L(w, b) = (1/n) Σ [softplus(z_i) - y_i z_i] + (λ/2)‖w‖²,   z_i = w·x_i + b
//! ```
//!
//! is minimized by full-batch gradient descent with an Armijo backtracking
//! line search, so every accepted step lowers the loss. The bias is not
//! penalized.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::auroc;
use crate::error::{Error, Result};

pub const DEFAULT_L2: f64 = 1.0;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const MIN_STD: f64 = 1e-8;
/// Fewest samples a probe is trained on.
pub const MIN_SAMPLES: usize = 10;

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;
const MAX_STEP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub split_seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            l2: DEFAULT_L2,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            split_seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !self.l2.is_finite() || self.l2 < 0.0 {
            return Err(Error::Config(format!("l2 must be finite and >= 0, got {}", self.l2)));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::Config(format!("tol must be > 0, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Row-major `n × d` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::Shape(format!("feature row of width {} among rows of width {d}", r.len())));
        }
        Ok(Self {
            n: rows.len(),
            d,
            data: rows.concat(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    fn check_finite(&self) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(())
    }
}

/// Per-feature mean and standard deviation (population, clamped at 1e-8).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &FeatureMatrix, rows: &[usize]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; x.dim()];
        for &i in rows {
            mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; x.dim()];
        for &i in rows {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(MIN_STD)).collect();
        Self { mean, std }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Regularized mean logistic loss over standardized rows.
pub struct LogisticObjective<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    l2: f64,
}

impl<'a> LogisticObjective<'a> {
    pub fn new(x: &'a [Vec<f64>], y: &'a [f64], l2: f64) -> Self {
        assert_eq!(x.len(), y.len());
        Self { x, y, l2 }
    }

    pub fn loss(&self, w: &[f64], b: f64) -> f64 {
        let n = self.x.len() as f64;
        let data: f64 = self
            .x
            .iter()
            .zip(self.y)
            .map(|(row, &y)| {
                let z = dot(w, row) + b;
                softplus(z) - y * z
            })
            .sum();
        data / n + 0.5 * self.l2 * dot(w, w)
    }

    /// Loss with gradient `(∂L/∂w, ∂L/∂b)`.
    pub fn loss_and_grad(&self, w: &[f64], b: f64) -> (f64, Vec<f64>, f64) {
        let n = self.x.len() as f64;
        let mut gw = vec![0.0; w.len()];
        let mut gb = 0.0;
        let mut data = 0.0;
        for (row, &y) in self.x.iter().zip(self.y) {
            let z = dot(w, row) + b;
            data += softplus(z) - y * z;
            let r = sigmoid(z) - y;
            gb += r;
            gw.iter_mut().zip(row).for_each(|(g, v)| *g += r * v);
        }
        gw.iter_mut().zip(w).for_each(|(g, wi)| *g = *g / n + self.l2 * wi);
        (data / n + 0.5 * self.l2 * dot(w, w), gw, gb / n)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Loss before the first step and after every accepted step.
    pub loss_history: Vec<f64>,
}

impl LogisticFit {
    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("history starts with the initial loss")
    }
}

/// Gradient descent from w = 0, b = 0 on already standardized rows.
pub fn fit_logistic(x: &[Vec<f64>], y: &[f64], hyper: &TrainHyper) -> LogisticFit {
    let d = x.first().map_or(0, Vec::len);
    let obj = LogisticObjective::new(x, y, hyper.l2);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let (mut loss, mut gw, mut gb) = obj.loss_and_grad(&w, b);
    let mut history = vec![loss];
    let mut step = 1.0;
    let mut iterations = 0;
    let mut grad_norm = (dot(&gw, &gw) + gb * gb).sqrt();
    let mut converged = grad_norm <= hyper.tol;
    while !converged && iterations < hyper.max_iter {
        let g2 = grad_norm * grad_norm;
        let mut accepted = None;
        while step >= MIN_STEP {
            let w_new: Vec<f64> = w.iter().zip(&gw).map(|(wi, g)| wi - step * g).collect();
            let b_new = b - step * gb;
            let l_new = obj.loss(&w_new, b_new);
            if l_new <= loss - ARMIJO_C * step * g2 {
                accepted = Some((w_new, b_new));
                break;
            }
            step *= 0.5;
        }
        let Some((w_new, b_new)) = accepted else {
            // no step decreases the loss further at machine precision
            break;
        };
        w = w_new;
        b = b_new;
        (loss, gw, gb) = obj.loss_and_grad(&w, b);
        history.push(loss);
        iterations += 1;
        grad_norm = (dot(&gw, &gw) + gb * gb).sqrt();
        converged = grad_norm <= hyper.tol;
        step = (step * 2.0).min(MAX_STEP);
    }
    LogisticFit {
        weights: w,
        bias: b,
        iterations,
        grad_norm,
        converged,
        loss_history: history,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub split_seed: u64,
    pub iterations: usize,
    pub final_loss: f64,
    pub converged: bool,
    pub n_train: usize,
}

/// A trained linear probe with its standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub train_meta: TrainMeta,
}

impl LinearProbe {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Probability that the response is correct.
    pub fn predict(&self, feature: &[f64]) -> Result<f64> {
        if feature.len() != self.dim() {
            return Err(Error::Schema(format!(
                "probe expects {} features, got {}",
                self.dim(),
                feature.len()
            )));
        }
        let z = feature
            .iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_std)
            .zip(&self.weights)
            .map(|(((v, m), s), w)| w * (v - m) / s)
            .sum::<f64>()
            + self.bias;
        Ok(sigmoid(z))
    }

    pub fn predict_rows(&self, x: &FeatureMatrix, rows: &[usize]) -> Result<Vec<f64>> {
        rows.iter().map(|&i| self.predict(x.row(i))).collect()
    }

    pub fn auroc_on(&self, x: &FeatureMatrix, labels: &[bool], rows: &[usize]) -> Result<f64> {
        let scores = self.predict_rows(x, rows)?;
        let y: Vec<bool> = rows.iter().map(|&i| labels[i]).collect();
        auroc(&scores, &y)
    }
}

/// Train and test row indices, both ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded stratified split of `rows` holding out `ceil(num/den · n)` rows.
///
/// Each class contributes test rows in proportion to its size, keeping at
/// least one row of every class with two or more members on both sides.
pub fn stratified_split(rows: &[usize], labels: &[bool], seed: u64, num: usize, den: usize) -> Split {
    let n = rows.len();
    let n_test = (n * num).div_ceil(den);
    let mut pos: Vec<usize> = rows.iter().copied().filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = rows.iter().copied().filter(|&i| !labels[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let bounds = |size: usize| if size >= 2 { (1, size - 1) } else { (0, size) };
    let (lo, hi) = bounds(pos.len());
    let want = (n_test * pos.len() + n / 2).checked_div(n).unwrap_or(0);
    let mut pos_test = want.clamp(lo, hi);
    let mut neg_test = n_test.saturating_sub(pos_test);
    let (nlo, nhi) = bounds(neg.len());
    if neg_test > nhi || neg_test < nlo {
        neg_test = neg_test.clamp(nlo, nhi);
        pos_test = n_test.saturating_sub(neg_test).min(pos.len());
    }
    let mut test: Vec<usize> = pos[..pos_test].iter().chain(&neg[..neg_test]).copied().collect();
    let mut train: Vec<usize> = pos[pos_test..].iter().chain(&neg[neg_test..]).copied().collect();
    test.sort_unstable();
    train.sort_unstable();
    Split { train, test }
}

/// The default 70/30 split over all rows.
pub fn train_test_split(labels: &[bool], seed: u64) -> Split {
    let rows: Vec<usize> = (0..labels.len()).collect();
    stratified_split(&rows, labels, seed, 3, 10)
}

/// Fits a probe on the given rows.
pub fn fit_probe(x: &FeatureMatrix, labels: &[bool], rows: &[usize], hyper: &TrainHyper) -> Result<LinearProbe> {
    hyper.validate()?;
    x.check_finite()?;
    if labels.len() != x.n_rows() {
        return Err(Error::Shape(format!("{} labels for {} feature rows", labels.len(), x.n_rows())));
    }
    let n_pos = rows.iter().filter(|&&i| labels[i]).count();
    if n_pos == 0 || n_pos == rows.len() {
        return Err(Error::Training("training rows contain a single class".into()));
    }
    let scaler = Standardizer::fit(x, rows);
    let xs: Vec<Vec<f64>> = rows.iter().map(|&i| scaler.apply(x.row(i))).collect();
    let ys: Vec<f64> = rows.iter().map(|&i| if labels[i] { 1.0 } else { 0.0 }).collect();
    let fit = fit_logistic(&xs, &ys, hyper);
    if fit.weights.iter().any(|w| !w.is_finite()) || !fit.bias.is_finite() {
        return Err(Error::Training("optimizer produced non-finite weights".into()));
    }
    Ok(LinearProbe {
        train_meta: TrainMeta {
            split_seed: hyper.split_seed,
            iterations: fit.iterations,
            final_loss: fit.final_loss(),
            converged: fit.converged,
            n_train: rows.len(),
        },
        weights: fit.weights,
        bias: fit.bias,
        feature_mean: scaler.mean,
        feature_std: scaler.std,
    })
}

/// Probe trained on the 70% split plus its held-out evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedProbe {
    pub probe: LinearProbe,
    pub split: Split,
    /// `None` when the test rows hold a single class.
    pub test_auroc: Option<f64>,
}

pub fn train_probe(x: &FeatureMatrix, labels: &[bool], hyper: &TrainHyper) -> Result<TrainedProbe> {
    if x.n_rows() < MIN_SAMPLES {
        return Err(Error::Data(format!(
            "need at least {MIN_SAMPLES} samples to train a probe, got {}",
            x.n_rows()
        )));
    }
    if labels.len() != x.n_rows() {
        return Err(Error::Shape(format!("{} labels for {} feature rows", labels.len(), x.n_rows())));
    }
    let split = train_test_split(labels, hyper.split_seed);
    let probe = fit_probe(x, labels, &split.train, hyper)?;
    let test_auroc = probe.auroc_on(x, labels, &split.test).ok();
    Ok(TrainedProbe { probe, split, test_auroc })
}
