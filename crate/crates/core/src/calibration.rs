//! Consistency-based variance calibration.
//!
//! Predictions are evaluated as Laplace distributions with scale
//! `b = √(σ²/2)`. The normalized estimation error squared is taken relative
//! to the predictive variance, `ε = (μ − z)²/σ² = (μ − z)²/(2b²)`, so that a
//! consistent estimator has `E[ε] = 1` for Laplace as well as Gaussian
//! residuals (a Laplace variable has `E[(z − μ)²] = 2b²`). The average `ε̄`
//! measured on training data rescales inference-time variances `σ̄² = ε̄σ²`.
//! All residuals are in latent (log-depth) space.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Laplace scale with the same variance: `2b² = σ²`.
pub fn laplace_scale(var: f64) -> Result<f64> {
    if var >= 0.0 && var.is_finite() {
        Ok((var * 0.5).sqrt())
    } else {
        Err(Error::Scale(var))
    }
}

/// Variance of a Laplace distribution with scale `b`.
pub fn laplace_variance(b: f64) -> f64 {
    2.0 * b * b
}

/// `ε = (μ − z)²/(2b²)`; one in expectation when `z ~ Laplace(μ, b)`.
pub fn nees(mu: f64, b: f64, z: f64) -> Result<f64> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::Scale(b));
    }
    let r = (mu - z) / b;
    Ok(0.5 * r * r)
}

/// Average NEES over a calibration set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    pub mean_nees: f64,
    /// Pixels that contributed to the mean.
    pub n_pixels: usize,
    /// Pixels skipped because their predicted scale was exactly zero.
    #[serde(default)]
    pub n_zero_scale: usize,
}

impl CalibrationState {
    /// Measures `ε̄` from latent means, Laplace scales and true latents.
    pub fn measure(mu: &[f64], b: &[f64], z: &[f64]) -> Result<Self> {
        check_dim("laplace scales", mu.len(), b.len())?;
        check_dim("true latents", mu.len(), z.len())?;
        let mut sum = 0.0;
        let mut n_pixels = 0;
        let mut n_zero_scale = 0;
        for ((&m, &s), &t) in mu.iter().zip(b).zip(z) {
            if s == 0.0 {
                n_zero_scale += 1;
                continue;
            }
            sum += nees(m, s, t)?;
            n_pixels += 1;
        }
        if n_pixels == 0 {
            return Err(Error::Empty("no pixels with a positive scale"));
        }
        let mean_nees = sum / n_pixels as f64;
        if !mean_nees.is_finite() {
            return Err(Error::NonFinite("mean NEES"));
        }
        Ok(Self { mean_nees, n_pixels, n_zero_scale })
    }

    /// Same as [`measure`](Self::measure) but from latent variances.
    pub fn measure_from_variance(mu: &[f64], var: &[f64], z: &[f64]) -> Result<Self> {
        let b = var.iter().map(|&v| laplace_scale(v)).collect::<Result<Vec<_>>>()?;
        Self::measure(mu, &b, z)
    }

    /// Pixel-weighted combination of two calibration sets.
    pub fn merge(&self, other: &Self) -> Self {
        let n = self.n_pixels + other.n_pixels;
        let mean_nees = if n == 0 {
            0.0
        } else {
            (self.mean_nees * self.n_pixels as f64 + other.mean_nees * other.n_pixels as f64) / n as f64
        };
        Self { mean_nees, n_pixels: n, n_zero_scale: self.n_zero_scale + other.n_zero_scale }
    }

    /// Rescales a latent variance: `σ̄² = ε̄σ²`.
    pub fn apply(&self, var: f64) -> Result<f64> {
        if self.n_pixels == 0 {
            return Err(Error::Empty("calibration state has no pixels"));
        }
        Ok(self.mean_nees * var)
    }
}
