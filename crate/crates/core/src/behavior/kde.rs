//! Gaussian kernel density estimate discretized on a fixed grid.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::stats::quantile_sorted;
use crate::error::{Error, Result};

pub const GRID_POINTS: usize = 256;

/// Grid extends this many bandwidths beyond the sample range on each side.
const GRID_PAD: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthRule {
    /// `0.9 · min(σ, IQR/1.34) · n^(-1/5)`
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityCurve {
    /// Trapezoidal integral of the density over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }

    /// Grid points that are strict local maxima of the density.
    pub fn modes(&self) -> Vec<f64> {
        (1..self.density.len().saturating_sub(1))
            .filter(|&i| self.density[i] > self.density[i - 1] && self.density[i] > self.density[i + 1])
            .map(|i| self.grid[i])
            .collect()
    }
}

/// Bandwidth from Silverman's rule, or the degenerate fallback
/// `1e-3 · max(max|x|, 1)` when the sample has no spread.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr / 1.34),
        (true, false) => sd,
        _ => return degenerate_bandwidth(samples),
    };
    0.9 * spread * n.powf(-0.2)
}

fn degenerate_bandwidth(samples: &[f64]) -> f64 {
    let max_abs = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    1e-3 * max_abs.max(1.0)
}

pub fn kde(samples: &[f64], rule: BandwidthRule) -> Result<DensityCurve> {
    if samples.len() < 2 {
        return Err(Error::Data(format!("KDE needs at least 2 samples, got {}", samples.len())));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("non-finite value in KDE sample".into()));
    }
    let bandwidth = match rule {
        BandwidthRule::Silverman => silverman_bandwidth(samples),
        BandwidthRule::Fixed(h) if h > 0.0 && h.is_finite() => h,
        BandwidthRule::Fixed(h) => return Err(Error::Config(format!("bandwidth must be > 0, got {h}"))),
    };
    let (min, max) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let start = min - GRID_PAD * bandwidth;
    let step = (max - min + 2.0 * GRID_PAD * bandwidth) / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| start + step * i as f64).collect();
    let density = grid.iter().map(|&x| density_at(samples, bandwidth, x)).collect();
    Ok(DensityCurve { grid, density, bandwidth })
}

/// Gaussian KDE value at `x`.
pub fn density_at(samples: &[f64], bandwidth: f64, x: f64) -> f64 {
    let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * PI).sqrt());
    norm * samples
        .iter()
        .map(|s| {
            let u = (x - s) / bandwidth;
            (-0.5 * u * u).exp()
        })
        .sum::<f64>()
}
