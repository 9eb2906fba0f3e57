//! Digamma function.
//!
//! Arguments below [`ASYMPTOTIC_THRESHOLD`] are shifted upward with the
//! recurrence `ψ(x) = ψ(x + 1) - 1/x`, then the asymptotic expansion
//!
//! ```text
//! ψ(x) ~ ln x - 1/(2x) - Σ B_2n / (2n x^2n)
//! ```
//!
//! is evaluated through the B_14 term. At x ≥ 10 the truncation error is
//! below 1e-17, so the absolute error is dominated by the shift sum.

use crate::error::{Error, Result};

const ASYMPTOTIC_THRESHOLD: f64 = 10.0;

// B_2n / (2n) for n = 1..=7.
const ASYMPTOTIC_COEFFS: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
];

/// ψ(x) for finite `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::Domain(format!("digamma requires finite x > 0, got {x}")));
    }
    Ok(digamma_positive(x))
}

/// ψ(x) without the domain check; callers guarantee `x > 0` and finite.
pub(crate) fn digamma_positive(x: f64) -> f64 {
    debug_assert!(x > 0.0 && x.is_finite());
    let mut x = x;
    let mut shift = 0.0;
    while x < ASYMPTOTIC_THRESHOLD {
        shift += 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    // Horner in 1/x^2, highest order first.
    let mut series = 0.0;
    for c in ASYMPTOTIC_COEFFS.iter().rev() {
        series = series * inv2 + c;
    }
    series *= inv2;
    x.ln() - 0.5 / x - series - shift
}
