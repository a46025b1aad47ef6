//! Depth accuracy and uncertainty quality metrics.
//!
//! * MAE, RMSE and δ1 are computed on metric depth.
//! * AUSE (area under the sparsification error) measures how well the
//!   predicted uncertainties rank the true errors.
//! * AUCE (area under the calibration error) measures how well Laplace
//!   prediction intervals `μ ± Ψ⁻¹((p+1)/2)·b` cover the truth.
//! * NLL is the full Laplace negative log likelihood,
//!   `|μ − z|/b + ln b + ln 2`.
//!
//! Uncertainty metrics work on latent log-depth unless told otherwise.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::fitting::PredictiveField;

const DELTA1_THRESHOLD: f64 = 1.25;

/// Parallel per-pixel arrays of predictions and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub pred_depth: Vec<f64>,
    pub true_depth: Vec<f64>,
    pub latent_mu: Vec<f64>,
    /// Laplace scale of the latent prediction.
    pub latent_b: Vec<f64>,
    pub valid: Vec<bool>,
}

impl EvalSet {
    pub fn new(
        pred_depth: Vec<f64>,
        true_depth: Vec<f64>,
        latent_mu: Vec<f64>,
        latent_b: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let n = pred_depth.len();
        check_dim("true depth", n, true_depth.len())?;
        check_dim("latent mean", n, latent_mu.len())?;
        check_dim("laplace scale", n, latent_b.len())?;
        check_dim("valid mask", n, valid.len())?;
        for i in (0..n).filter(|&i| valid[i]) {
            if !(true_depth[i] > 0.0 && true_depth[i].is_finite()) {
                return Err(Error::Measurement { row: i, col: 0, depth: true_depth[i] });
            }
            if !(latent_b[i] >= 0.0 && latent_b[i].is_finite()) {
                return Err(Error::Scale(latent_b[i]));
            }
            if !(pred_depth[i].is_finite() && latent_mu[i].is_finite()) {
                return Err(Error::NonFinite("prediction"));
            }
        }
        Ok(Self { pred_depth, true_depth, latent_mu, latent_b, valid })
    }

    /// Builds a set from a latent predictive field; every pixel with a
    /// positive finite true depth is valid. `pred_depth = exp(μ)`.
    pub fn from_field(field: &PredictiveField, true_depth: &[f64]) -> Result<Self> {
        check_dim("true depth", field.len(), true_depth.len())?;
        let valid: Vec<bool> = true_depth.iter().map(|d| *d > 0.0 && d.is_finite()).collect();
        let pred_depth = field.mean.iter().map(|m| m.exp()).collect();
        Self::new(pred_depth, true_depth.to_vec(), field.mean.clone(), field.laplace_scales(), valid)
    }

    /// Same set with every Laplace scale multiplied by `c`.
    pub fn with_scaled_uncertainty(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.latent_b.iter_mut().for_each(|b| *b *= c);
        out
    }

    pub fn len(&self) -> usize {
        self.pred_depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pred_depth.is_empty()
    }

    fn valid_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.valid[i]).collect()
    }

    fn latent_truth(&self, i: usize) -> f64 {
        self.true_depth[i].ln()
    }

    fn latent_error(&self, i: usize) -> f64 {
        (self.latent_mu[i] - self.latent_truth(i)).abs()
    }

    fn depth_error(&self, i: usize) -> f64 {
        (self.pred_depth[i] - self.true_depth[i]).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    /// Meters.
    pub mae: f64,
    /// Meters.
    pub rmse: f64,
    /// Percent of pixels with `max(d̂/d, d/d̂) < 1.25`.
    pub delta1: f64,
}

pub fn depth_metrics(set: &EvalSet) -> Result<DepthMetrics> {
    let idx = set.valid_indices();
    if idx.is_empty() {
        return Err(Error::Empty("no valid pixels"));
    }
    let n = idx.len() as f64;
    let (mut abs, mut sq, mut hits) = (0.0, 0.0, 0usize);
    for &i in &idx {
        let (p, t) = (set.pred_depth[i], set.true_depth[i]);
        let e = (p - t).abs();
        abs += e;
        sq += e * e;
        if (p / t).max(t / p) < DELTA1_THRESHOLD {
            hits += 1;
        }
    }
    Ok(DepthMetrics { mae: abs / n, rmse: (sq / n).sqrt(), delta1: 100.0 * hits as f64 / n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BaseMetric {
    #[default]
    Mae,
    Rmse,
}

/// Space in which sparsification errors are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ErrorSpace {
    #[default]
    Latent,
    Depth,
}

/// Sampled curve with named axes, written as two-column CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveData {
    pub x_label: &'static str,
    pub y_label: &'static str,
    pub abscissa: Vec<f64>,
    pub ordinate: Vec<f64>,
}

impl CurveData {
    pub fn new(x_label: &'static str, y_label: &'static str, abscissa: Vec<f64>, ordinate: Vec<f64>) -> Result<Self> {
        check_dim("curve ordinate", abscissa.len(), ordinate.len())?;
        if abscissa.iter().any(|x| !(0.0..=1.0).contains(x)) || abscissa.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("curve abscissa must be strictly increasing in [0, 1]".into()));
        }
        Ok(Self { x_label, y_label, abscissa, ordinate })
    }

    pub fn len(&self) -> usize {
        self.abscissa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.abscissa.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},{}\n", self.x_label, self.y_label);
        for (x, y) in self.abscissa.iter().zip(&self.ordinate) {
            let _ = writeln!(out, "{x},{y}");
        }
        out
    }
}

/// Sparsification curves of the predicted uncertainty and of the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct Sparsification {
    pub ause: f64,
    pub fractions: Vec<f64>,
    /// Error of the retained pixels after removing the most uncertain ones.
    pub method: Vec<f64>,
    /// Same, removing the pixels with the largest true error.
    pub oracle: Vec<f64>,
}

impl Sparsification {
    pub fn method_curve(&self) -> CurveData {
        CurveData {
            x_label: "fraction_removed",
            y_label: "error",
            abscissa: self.fractions.clone(),
            ordinate: self.method.clone(),
        }
    }

    pub fn oracle_curve(&self) -> CurveData {
        CurveData {
            x_label: "fraction_removed",
            y_label: "oracle_error",
            abscissa: self.fractions.clone(),
            ordinate: self.oracle.clone(),
        }
    }

    /// Method minus oracle; AUSE is the area under this curve.
    pub fn error_curve(&self) -> CurveData {
        CurveData {
            x_label: "fraction_removed",
            y_label: "sparsification_error",
            abscissa: self.fractions.clone(),
            ordinate: self.method.iter().zip(&self.oracle).map(|(m, o)| m - o).collect(),
        }
    }
}

fn bins_for_step(step: f64) -> Result<usize> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("sparsification step must lie in (0, 1], got {step}")));
    }
    let bins = (1.0 / step).round();
    if (bins * step - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("sparsification step {step} does not divide 1")));
    }
    Ok(bins as usize)
}

/// Error of the retained pixels for each removal fraction `i/bins`, removing
/// pixels in `order` first-to-last.
fn retained_errors(order: &[usize], err: &[f64], base: BaseMetric, bins: usize) -> Vec<f64> {
    let n = order.len();
    // suffix sums over the removal order: retained set after removing k is order[k..]
    let mut suffix = vec![0.0; n + 1];
    for k in (0..n).rev() {
        let e = err[order[k]];
        suffix[k] = suffix[k + 1] + if base == BaseMetric::Mae { e } else { e * e };
    }
    (0..bins)
        .map(|i| {
            let k = i * n / bins;
            let mean = suffix[k] / (n - k) as f64;
            match base {
                BaseMetric::Mae => mean,
                BaseMetric::Rmse => mean.sqrt(),
            }
        })
        .collect()
}

fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // stable: ties keep pixel order
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

/// Area between the sparsification curve obtained by removing the most
/// uncertain pixels first and the oracle curve obtained by removing the
/// largest true errors first. Fractions run over `0, step, …, 1 − step` and
/// the area uses the trapezoidal rule.
pub fn ause(set: &EvalSet, base: BaseMetric, step: f64, space: ErrorSpace) -> Result<Sparsification> {
    let bins = bins_for_step(step)?;
    let idx = set.valid_indices();
    if idx.len() < 2 {
        return Err(Error::Empty("sparsification needs at least two valid pixels"));
    }
    let err: Vec<f64> = idx
        .iter()
        .map(|&i| match space {
            ErrorSpace::Latent => set.latent_error(i),
            ErrorSpace::Depth => set.depth_error(i),
        })
        .collect();
    let unc: Vec<f64> = idx.iter().map(|&i| set.latent_b[i]).collect();
    let method = retained_errors(&descending_order(&unc), &err, base, bins);
    let oracle = retained_errors(&descending_order(&err), &err, base, bins);
    let gap: Vec<f64> = method.iter().zip(&oracle).map(|(m, o)| m - o).collect();
    let ause = gap.windows(2).map(|w| 0.5 * (w[0] + w[1]) * step).sum();
    let fractions = (0..bins).map(|i| i as f64 / bins as f64).collect();
    Ok(Sparsification { ause, fractions, method, oracle })
}

/// Quantile function of the standard Laplace distribution.
pub fn laplace_quantile(q: f64) -> f64 {
    if q >= 0.5 {
        -(2.0 * (1.0 - q)).ln()
    } else {
        (2.0 * q).ln()
    }
}

/// Calibration curve of Laplace prediction intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCurve {
    pub auce: f64,
    /// Nominal coverage.
    pub p: Vec<f64>,
    /// Observed coverage.
    pub p_hat: Vec<f64>,
}

impl CalibrationCurve {
    /// `p ↦ |p − p̂|`.
    pub fn error_curve(&self) -> CurveData {
        CurveData {
            x_label: "p",
            y_label: "calibration_error",
            abscissa: self.p.clone(),
            ordinate: self.p.iter().zip(&self.p_hat).map(|(p, q)| (p - q).abs()).collect(),
        }
    }
}

/// Uniform grid of `grid` coverage levels strictly inside (0, 1).
pub fn coverage_grid(grid: usize) -> Vec<f64> {
    (1..=grid).map(|j| j as f64 / (grid + 1) as f64).collect()
}

/// Mean absolute gap between nominal and observed coverage of the intervals
/// `μ ± Ψ⁻¹((p+1)/2)·b` over a uniform grid of `p`. A pixel with `b = 0` is
/// covered only if its error is exactly zero.
pub fn auce(set: &EvalSet, grid: usize) -> Result<CalibrationCurve> {
    if grid < 2 {
        return Err(Error::Config(format!("calibration grid needs at least 2 points, got {grid}")));
    }
    let idx = set.valid_indices();
    if idx.is_empty() {
        return Err(Error::Empty("no valid pixels"));
    }
    let mut normalized: Vec<f64> = idx
        .iter()
        .map(|&i| {
            let e = set.latent_error(i);
            let b = set.latent_b[i];
            if e == 0.0 {
                0.0
            } else if b == 0.0 {
                f64::INFINITY
            } else {
                e / b
            }
        })
        .collect();
    normalized.sort_by(f64::total_cmp);
    let n = normalized.len() as f64;
    let p = coverage_grid(grid);
    let p_hat: Vec<f64> = p
        .iter()
        .map(|&p| {
            let half_width = laplace_quantile(0.5 * (p + 1.0));
            normalized.partition_point(|&t| t <= half_width) as f64 / n
        })
        .collect();
    let auce = p.iter().zip(&p_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / grid as f64;
    Ok(CalibrationCurve { auce, p, p_hat })
}

/// Mean Laplace negative log likelihood of the true latent depths.
pub fn nll(set: &EvalSet) -> Result<f64> {
    let idx = set.valid_indices();
    if idx.is_empty() {
        return Err(Error::Empty("no valid pixels"));
    }
    let mut total = 0.0;
    for &i in &idx {
        let b = set.latent_b[i];
        if !(b > 0.0) {
            return Err(Error::Scale(b));
        }
        total += set.latent_error(i) / b + b.ln() + std::f64::consts::LN_2;
    }
    Ok(total / idx.len() as f64)
}

/// Mean and population variance of ensemble member means.
pub fn ensemble_mean_var(means: &[f64]) -> Result<(f64, f64)> {
    if means.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    let k = means.len() as f64;
    let mu = means.iter().sum::<f64>() / k;
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / k;
    Ok((mu, var))
}

/// Mixture moments of predictive ensemble members:
/// `σ² = (1/K) Σ ((μᵢ − μ)² + σᵢ²)`.
pub fn ensemble_predictive(means: &[f64], vars: &[f64]) -> Result<(f64, f64)> {
    check_dim("ensemble variances", means.len(), vars.len())?;
    let (mu, spread) = ensemble_mean_var(means)?;
    Ok((mu, spread + vars.iter().sum::<f64>() / means.len() as f64))
}
