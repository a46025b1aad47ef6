//! Weight inference over a fixed basis.
//!
//! Depth is modelled in log space as `z = wᵀφ + ε` with `ε ~ N(0, β⁻¹)` and a
//! prior `w ~ N(m0, α⁻¹Σ0)`. This module provides the maximum-likelihood
//! solution used on the training path, the conjugate posterior, predictive
//! moments, EM re-estimation of `(α, β)` and the log evidence that EM ascends.
//!
//! All solves go through [`SpdFactor`]. Precisions are capped at
//! [`PRECISION_MAX`] so that interpolating fits (zero residual) stay finite.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisMap, RegressionSystem};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{condition_estimate, is_symmetric, symmetrize, SpdFactor};

/// Upper bound on `α` and `β`; equivalently variances never drop below `1e-12`.
pub const PRECISION_MAX: f64 = 1e12;
/// Normal equations with a larger eigenvalue ratio are treated as rank deficient.
pub const MAX_CONDITION: f64 = 1e12;
/// Absolute symmetry tolerance for prior covariances (relative to their largest entry when > 1).
pub const SYMMETRY_TOL: f64 = 1e-10;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Shared weight prior `N(m0, α⁻¹Σ0)`; stores the unscaled `Σ0`.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    precision: DMatrix<f64>,
    ln_det: f64,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let m = mean.len();
        if m == 0 {
            return Err(Error::InvalidPrior("zero-dimensional prior".into()));
        }
        if cov.nrows() != m || cov.ncols() != m {
            return Err(Error::InvalidPrior(format!(
                "covariance is {}x{}, mean has length {m}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPrior("non-finite entries".into()));
        }
        let scale = cov.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
        if !is_symmetric(&cov, SYMMETRY_TOL * scale) {
            return Err(Error::InvalidPrior("covariance is not symmetric".into()));
        }
        let factor =
            SpdFactor::new(&cov).map_err(|_| Error::InvalidPrior("covariance is not positive definite".into()))?;
        if factor.jitter() > 0.0 {
            return Err(Error::InvalidPrior("covariance is not positive definite".into()));
        }
        Ok(Self { precision: factor.inverse(), ln_det: factor.ln_det(), mean, cov })
    }

    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let m = mean.len();
        Self::new(mean, DMatrix::identity(m, m) * variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// `Σ0⁻¹`.
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// `ln |Σ0|`.
    pub fn ln_det(&self) -> f64 {
        self.ln_det
    }

    /// Mahalanobis form `vᵀ Σ0⁻¹ v`.
    pub fn mahalanobis(&self, v: &DVector<f64>) -> f64 {
        v.dot(&(&self.precision * v))
    }
}

/// Maximum-likelihood fit `w = (ΦᵀΦ)⁻¹Φᵀz`, `β⁻¹ = ‖z − Φw‖²/N`.
#[derive(Debug, Clone)]
pub struct MlFit {
    pub weights: DVector<f64>,
    pub beta: f64,
    pub n_obs: usize,
    /// Set when the residual was small enough for `β` to hit [`PRECISION_MAX`].
    pub beta_capped: bool,
    gram_inv: DMatrix<f64>,
}

impl MlFit {
    /// `(ΦᵀΦ)⁻¹`.
    pub fn gram_inverse(&self) -> &DMatrix<f64> {
        &self.gram_inv
    }
}

/// Gaussian posterior over the weights together with the hyperparameters it
/// was computed under.
#[derive(Debug, Clone)]
pub struct PosteriorFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub n_obs: usize,
    pub n_bases: usize,
    /// Number of completed M-steps; zero for a direct conjugate fit.
    pub em_iters: usize,
    pub converged: bool,
    /// Diagonal jitter applied to the posterior precision.
    pub jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Stop once `|Δβ|/β` falls below this.
    pub tol: f64,
    /// Initial `α`; defaults to 1.
    pub alpha0: Option<f64>,
    /// Initial `β`; defaults to `√N`.
    pub beta0: Option<f64>,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { max_iters: 8, tol: 0.01, alpha0: None, beta0: None }
    }
}

/// Hyperparameters visited by EM, starting with the initial guess.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmStep {
    pub alpha: f64,
    pub beta: f64,
}

/// Sufficient statistics of a regression system.
struct Normal {
    gram: DMatrix<f64>,
    phi_t_z: DVector<f64>,
}

impl Normal {
    fn new(sys: &RegressionSystem) -> Self {
        let design = sys.design();
        Self { gram: symmetrize(design.tr_mul(design)), phi_t_z: design.tr_mul(sys.targets()) }
    }
}

struct Posterior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    ln_det_precision: f64,
    jitter: f64,
}

fn check_precision(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::Hyperparameter { name, value })
    }
}

fn posterior(
    sys: &RegressionSystem,
    normal: &Normal,
    prior: &GaussianPrior,
    alpha: f64,
    beta: f64,
) -> Result<Posterior> {
    if sys.n_obs() == 0 {
        return Ok(Posterior {
            mean: prior.mean.clone(),
            cov: &prior.cov / alpha,
            ln_det_precision: prior.dim() as f64 * alpha.ln() - prior.ln_det,
            jitter: 0.0,
        });
    }
    let precision = prior.precision() * alpha + &normal.gram * beta;
    let factor = SpdFactor::new(&precision)?;
    let rhs = prior.precision() * prior.mean() * alpha + &normal.phi_t_z * beta;
    let mean = factor.solve(&rhs);
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("posterior mean"));
    }
    Ok(Posterior { mean, cov: factor.inverse(), ln_det_precision: factor.ln_det(), jitter: factor.jitter() })
}

fn check_system(sys: &RegressionSystem, prior: &GaussianPrior) -> Result<()> {
    check_dim("prior dimension", sys.n_bases(), prior.dim())
}

/// Maximum-likelihood weights and noise precision. Requires `N ≥ M`.
pub fn fit_ml(sys: &RegressionSystem) -> Result<MlFit> {
    let (n, m) = (sys.n_obs(), sys.n_bases());
    if n < m {
        return Err(Error::Underdetermined { n_obs: n, n_bases: m });
    }
    let normal = Normal::new(sys);
    let condition = condition_estimate(&normal.gram);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Rank { condition });
    }
    let factor = SpdFactor::new(&normal.gram)?;
    let weights = factor.solve(&normal.phi_t_z);
    let rss = (sys.targets() - sys.design() * &weights).norm_squared();
    let noise_var = rss / n as f64;
    let (beta, beta_capped) =
        if noise_var * PRECISION_MAX <= 1.0 { (PRECISION_MAX, true) } else { (1.0 / noise_var, false) };
    Ok(MlFit { weights, beta, n_obs: n, beta_capped, gram_inv: factor.inverse() })
}

/// Conjugate posterior `Σ = (αΣ0⁻¹ + βΦᵀΦ)⁻¹`, `m = Σ(αΣ0⁻¹m0 + βΦᵀz)`.
///
/// With no observations the prior is returned unchanged: `m = m0`, `Σ = Σ0/α`.
pub fn fit_bayes(sys: &RegressionSystem, prior: &GaussianPrior, alpha: f64, beta: f64) -> Result<PosteriorFit> {
    check_system(sys, prior)?;
    check_precision("alpha", alpha)?;
    check_precision("beta", beta)?;
    let post = posterior(sys, &Normal::new(sys), prior, alpha, beta)?;
    Ok(PosteriorFit {
        mean: post.mean,
        cov: post.cov,
        alpha,
        beta,
        n_obs: sys.n_obs(),
        n_bases: sys.n_bases(),
        em_iters: 0,
        converged: false,
        jitter: post.jitter,
    })
}

fn quad_form(a: &DMatrix<f64>, v: &[f64]) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..n {
            col += a[(i, j)] * v[i];
        }
        acc += col * v[j];
    }
    acc.max(0.0)
}

fn dot(a: &DVector<f64>, v: &[f64]) -> f64 {
    a.iter().zip(v).map(|(x, y)| x * y).sum()
}

fn check_phi(expected: usize, phi: &[f64]) -> Result<()> {
    check_dim("basis vector", expected, phi.len())?;
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("basis vector"));
    }
    Ok(())
}

/// Latent predictive moments `μ = mᵀφ`, `σ² = φᵀΣφ`, optionally plus `β⁻¹`.
pub fn predict(fit: &PosteriorFit, phi: &[f64], include_noise: bool) -> Result<Prediction> {
    check_phi(fit.n_bases, phi)?;
    let mut var = quad_form(&fit.cov, phi);
    if include_noise {
        var += 1.0 / fit.beta;
    }
    Ok(Prediction { mean: dot(&fit.mean, phi), var })
}

/// Training-path predictive moments `μ = w_MLᵀφ`, `σ² = β_ML⁻¹ φᵀ(ΦᵀΦ)⁻¹φ`.
pub fn predict_ml(fit: &MlFit, phi: &[f64]) -> Result<Prediction> {
    check_phi(fit.weights.len(), phi)?;
    Ok(Prediction { mean: dot(&fit.weights, phi), var: quad_form(&fit.gram_inv, phi) / fit.beta })
}

/// Prior-only prediction `μ = m0ᵀφ`, `σ² = φᵀΣ0φ`, used when there are no
/// measurements. `α` is taken as 1.
pub fn predict_prior(prior: &GaussianPrior, phi: &[f64]) -> Result<Prediction> {
    check_phi(prior.dim(), phi)?;
    Ok(Prediction { mean: dot(&prior.mean, phi), var: quad_form(&prior.cov, phi) })
}

/// `tr(AB)` for symmetric `A`, `B`.
fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

/// EM estimate of `(α, β)` followed by the posterior under the final values.
pub fn fit_em(sys: &RegressionSystem, prior: &GaussianPrior, opts: &EmOptions) -> Result<PosteriorFit> {
    fit_em_traced(sys, prior, opts).map(|(fit, _)| fit)
}

/// [`fit_em`] that also returns every `(α, β)` pair the E-step was run with.
pub fn fit_em_traced(
    sys: &RegressionSystem,
    prior: &GaussianPrior,
    opts: &EmOptions,
) -> Result<(PosteriorFit, Vec<EmStep>)> {
    check_system(sys, prior)?;
    let n = sys.n_obs();
    if n == 0 {
        return Err(Error::Empty("EM needs at least one measurement"));
    }
    if !(opts.tol >= 0.0) {
        return Err(Error::Config(format!("EM tolerance must be non-negative, got {}", opts.tol)));
    }
    let m = sys.n_bases() as f64;
    let mut alpha = opts.alpha0.unwrap_or(1.0);
    let mut beta = opts.beta0.unwrap_or((n as f64).sqrt());
    check_precision("alpha", alpha)?;
    check_precision("beta", beta)?;

    let normal = Normal::new(sys);
    let mut trace = vec![EmStep { alpha, beta }];
    let mut iters = 0;
    let mut converged = false;
    while iters < opts.max_iters {
        let post = posterior(sys, &normal, prior, alpha, beta)?;
        let dm = &post.mean - prior.mean();
        let alpha_inv = (prior.mahalanobis(&dm) + trace_product(prior.precision(), &post.cov)) / m;
        let rss = (sys.targets() - sys.design() * &post.mean).norm_squared();
        let beta_inv = (rss + trace_product(&normal.gram, &post.cov)) / n as f64;
        if !(alpha_inv.is_finite() && beta_inv.is_finite()) {
            return Err(Error::NonFinite("EM re-estimation"));
        }
        let new_alpha = capped_inverse(alpha_inv);
        let new_beta = capped_inverse(beta_inv);
        iters += 1;
        let change = (new_beta - beta).abs() / beta;
        alpha = new_alpha;
        beta = new_beta;
        trace.push(EmStep { alpha, beta });
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    let post = posterior(sys, &normal, prior, alpha, beta)?;
    let fit = PosteriorFit {
        mean: post.mean,
        cov: post.cov,
        alpha,
        beta,
        n_obs: n,
        n_bases: sys.n_bases(),
        em_iters: iters,
        converged,
        jitter: post.jitter,
    };
    Ok((fit, trace))
}

fn capped_inverse(v: f64) -> f64 {
    if v * PRECISION_MAX <= 1.0 {
        PRECISION_MAX
    } else {
        1.0 / v
    }
}

/// Log marginal likelihood `ln p(z | α, β)` with the weights integrated out:
///
/// `½(N ln β + M ln α − N ln 2π − E(m) + ln|Σ| − ln|Σ0|)`,
/// `E(m) = β‖z − Φm‖² + α(m − m0)ᵀΣ0⁻¹(m − m0)`.
///
/// `Σ0` is the unscaled prior covariance, so the prior's `α`-dependence enters
/// only through `M ln α`. The value is invariant under `Σ0 → cΣ0, α → cα`.
pub fn log_evidence(sys: &RegressionSystem, prior: &GaussianPrior, alpha: f64, beta: f64) -> Result<f64> {
    check_system(sys, prior)?;
    check_precision("alpha", alpha)?;
    check_precision("beta", beta)?;
    let n = sys.n_obs();
    if n == 0 {
        return Ok(0.0);
    }
    let post = posterior(sys, &Normal::new(sys), prior, alpha, beta)?;
    let rss = (sys.targets() - sys.design() * &post.mean).norm_squared();
    let dm = &post.mean - prior.mean();
    let energy = beta * rss + alpha * prior.mahalanobis(&dm);
    let (n, m) = (n as f64, sys.n_bases() as f64);
    Ok(0.5 * (n * beta.ln() + m * alpha.ln() - n * LN_2PI - energy - post.ln_det_precision - prior.ln_det()))
}

/// Result of [`infer`]: the dense prediction and, when measurements were
/// available, the posterior it came from.
#[derive(Debug, Clone)]
pub struct Inference {
    pub field: PredictiveField,
    pub fit: Option<PosteriorFit>,
}

/// Per-image inference: EM over the measured pixels, or the shared prior
/// alone when there are none.
pub fn infer(
    basis: &BasisMap,
    sparse: &crate::basis::SparseDepthSet,
    prior: &GaussianPrior,
    em: &EmOptions,
    include_noise: bool,
) -> Result<Inference> {
    check_dim("prior dimension", basis.num_bases(), prior.dim())?;
    if sparse.is_empty() {
        return Ok(Inference { field: PredictiveField::from_prior(prior, basis)?, fit: None });
    }
    let sys = crate::basis::assemble(basis, sparse)?;
    let fit = fit_em(&sys, prior, em)?;
    Ok(Inference { field: PredictiveField::from_posterior(&fit, basis, include_noise)?, fit: Some(fit) })
}

/// Dense per-pixel latent predictive moments.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveField {
    pub height: usize,
    pub width: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl PredictiveField {
    fn collect(basis: &BasisMap, mut f: impl FnMut(&[f64]) -> Result<Prediction>) -> Result<Self> {
        let mut mean = Vec::with_capacity(basis.num_pixels());
        let mut var = Vec::with_capacity(basis.num_pixels());
        for phi in basis.pixels() {
            let p = f(phi)?;
            mean.push(p.mean);
            var.push(p.var);
        }
        Ok(Self { height: basis.height(), width: basis.width(), mean, var })
    }

    pub fn from_posterior(fit: &PosteriorFit, basis: &BasisMap, include_noise: bool) -> Result<Self> {
        Self::collect(basis, |phi| predict(fit, phi, include_noise))
    }

    pub fn from_ml(fit: &MlFit, basis: &BasisMap) -> Result<Self> {
        Self::collect(basis, |phi| predict_ml(fit, phi))
    }

    pub fn from_prior(prior: &GaussianPrior, basis: &BasisMap) -> Result<Self> {
        Self::collect(basis, |phi| predict_prior(prior, phi))
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Variances multiplied by `factor` (the calibration scale).
    pub fn scale_variance(&mut self, factor: f64) {
        self.var.iter_mut().for_each(|v| *v *= factor);
    }

    /// Laplace scales `b = √(σ²/2)`.
    pub fn laplace_scales(&self) -> Vec<f64> {
        self.var.iter().map(|v| (v.max(0.0) * 0.5).sqrt()).collect()
    }
}
