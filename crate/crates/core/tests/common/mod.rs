//! Test-only oracles shared by the integration suites. Nothing here calls into
//! the fitting code it is used to check.
#![allow(dead_code)]

use bdbf::{GaussianPrior, RegressionSystem};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn laplace(rng: &mut ChaCha8Rng, mu: f64, b: f64) -> f64 {
    let e: f64 = Exp1.sample(rng);
    if rng.random_bool(0.5) {
        mu + b * e
    } else {
        mu - b * e
    }
}

pub fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

pub fn random_system(rng: &mut ChaCha8Rng, n: usize, m: usize) -> RegressionSystem {
    let design = DMatrix::from_fn(n, m, |_, _| normal(rng));
    let targets = DVector::from_fn(n, |_, _| normal(rng));
    RegressionSystem::from_parts(design, targets).unwrap()
}

pub fn random_prior(rng: &mut ChaCha8Rng, m: usize) -> GaussianPrior {
    let a = DMatrix::from_fn(m, m, |_, _| normal(rng));
    let cov = &a * a.transpose() + DMatrix::identity(m, m) * 0.5;
    let cov = (&cov + cov.transpose()) * 0.5;
    let mean = DVector::from_fn(m, |_, _| normal(rng));
    GaussianPrior::new(mean, cov).unwrap()
}

/// Adaptive Simpson quadrature.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, left, lm, flm, tol / 2.0, depth - 1)
            + recurse(f, m, fm, b, fb, right, rm, frm, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 50)
}

/// `ln ∫ Πᵢ N(zᵢ; φᵢw, β⁻¹) N(w; m0, σ0²/α) dw` for a single weight, by
/// quadrature around the mode of the integrand.
pub fn log_evidence_by_quadrature(phi: &[f64], z: &[f64], m0: f64, s0: f64, alpha: f64, beta: f64) -> f64 {
    let prior_var = s0 / alpha;
    let log_integrand = |w: f64| {
        let lik: f64 = phi
            .iter()
            .zip(z)
            .map(|(p, t)| 0.5 * (beta / (2.0 * std::f64::consts::PI)).ln() - 0.5 * beta * (t - p * w).powi(2))
            .sum();
        let pri = -0.5 * (2.0 * std::f64::consts::PI * prior_var).ln() - 0.5 * (w - m0).powi(2) / prior_var;
        lik + pri
    };
    // mode and curvature of the (Gaussian) integrand in closed scalar form
    let prec = 1.0 / prior_var + beta * phi.iter().map(|p| p * p).sum::<f64>();
    let mode = (m0 / prior_var + beta * phi.iter().zip(z).map(|(p, t)| p * t).sum::<f64>()) / prec;
    let sd = prec.recip().sqrt();
    let peak = log_integrand(mode);
    let f = |w: f64| (log_integrand(w) - peak).exp();
    let area = integrate(&f, mode - 40.0 * sd, mode + 40.0 * sd, 1e-13 * sd);
    peak + area.ln()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[usize]) -> f64 {
    let mut s = v.to_vec();
    s.sort();
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2] as f64
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2]) as f64
    }
}
