//! Deterministic synthetic scenes.
//!
//! A scene draws smooth random basis channels (white noise blurred with a
//! Gaussian of the configured correlation length, then standardized), a
//! weight vector from the generating prior `N(m0, α⁻¹Σ0)`, and latent depth
//! `z = φᵀw + ε` with Gaussian or Laplace noise of precision `β`. Sparse
//! measurements are sampled without replacement among pixels closer than the
//! depth cap. Everything is driven by a single ChaCha stream so a config and
//! seed reproduce the scene bit for bit.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisMap, RegressionSystem, SparseDepth, SparseDepthSet};
use crate::error::{check_dim, Error, Result};
use crate::fitting::GaussianPrior;
use crate::linalg::SpdFactor;

pub const DEFAULT_DEPTH_CAP: f64 = 80.0;

/// How many pixels carry a measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sparsity {
    /// Fraction of all image pixels, rounded to the nearest count.
    Fraction(f64),
    Count(usize),
}

impl Sparsity {
    pub fn count(&self, num_pixels: usize) -> Result<usize> {
        match *self {
            Sparsity::Count(k) => Ok(k),
            Sparsity::Fraction(f) if (0.0..=1.0).contains(&f) => Ok((f * num_pixels as f64).round() as usize),
            Sparsity::Fraction(f) => Err(Error::Config(format!("sparsity fraction {f} outside [0, 1]"))),
        }
    }
}

impl std::str::FromStr for Sparsity {
    type Err = Error;

    /// `"500"` is a count; `"0.05"` or `"5%"` is a fraction.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("invalid sparsity level {s:?}"));
        if let Some(pct) = s.strip_suffix('%') {
            let v: f64 = pct.trim().parse().map_err(|_| bad())?;
            return Ok(Sparsity::Fraction(v / 100.0));
        }
        if s.contains(['.', 'e', 'E']) {
            let v: f64 = s.parse().map_err(|_| bad())?;
            return Ok(Sparsity::Fraction(v));
        }
        s.parse().map(Sparsity::Count).map_err(|_| bad())
    }
}

impl std::fmt::Display for Sparsity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Sparsity::Fraction(v) => write!(f, "{}%", v * 100.0),
            Sparsity::Count(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    #[default]
    Gaussian,
    Laplace,
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub num_bases: usize,
    /// Channel 0 is the constant one.
    pub bias: bool,
    pub seed: u64,
    /// Latent noise precision `β`; `f64::INFINITY` switches noise off.
    pub noise_precision: f64,
    pub noise_family: NoiseFamily,
    /// Generating prior `N(m0, α⁻¹Σ0)` for the weights.
    pub prior: GaussianPrior,
    pub prior_alpha: f64,
    pub sparsity: Sparsity,
    /// Gaussian blur width of the basis channels, in pixels.
    pub smoothness: f64,
    /// Only pixels shallower than this are sampled; `None` samples anywhere.
    pub depth_cap: Option<f64>,
}

impl SynthConfig {
    /// 64×64 scene with the default prior, `β = 4`, Gaussian noise and 500
    /// measurements.
    pub fn new(height: usize, width: usize, num_bases: usize) -> Self {
        Self {
            height,
            width,
            num_bases,
            bias: true,
            seed: 0,
            noise_precision: 4.0,
            noise_family: NoiseFamily::Gaussian,
            prior: default_prior(num_bases, true),
            prior_alpha: 1.0,
            sparsity: Sparsity::Count(500),
            smoothness: 4.0,
            depth_cap: Some(DEFAULT_DEPTH_CAP),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.num_bases == 0 {
            return Err(Error::Config("scene dimensions must be positive".into()));
        }
        if self.bias && self.num_bases < 1 {
            return Err(Error::Config("bias channel needs at least one basis".into()));
        }
        check_dim("generating prior", self.num_bases, self.prior.dim())?;
        if !(self.noise_precision > 0.0) {
            return Err(Error::Hyperparameter { name: "noise precision", value: self.noise_precision });
        }
        if !(self.prior_alpha > 0.0 && self.prior_alpha.is_finite()) {
            return Err(Error::Hyperparameter { name: "prior alpha", value: self.prior_alpha });
        }
        if !(self.smoothness >= 0.0 && self.smoothness.is_finite()) {
            return Err(Error::Config(format!("smoothness must be non-negative, got {}", self.smoothness)));
        }
        if let Some(cap) = self.depth_cap {
            if !(cap > 0.0) {
                return Err(Error::Config(format!("depth cap must be positive, got {cap}")));
            }
        }
        self.sparsity.count(self.height * self.width)?;
        Ok(())
    }
}

/// Prior used by [`SynthConfig::new`]: bias weight `N(2.5, 0.25)` (depths
/// around 12 m) and independent `N(0, 0.05)` weights on the other channels.
pub fn default_prior(num_bases: usize, bias: bool) -> GaussianPrior {
    let mean = DVector::from_fn(num_bases, |i, _| if bias && i == 0 { 2.5 } else { 0.0 });
    let cov = DMatrix::from_fn(num_bases, num_bases, |i, j| match (i == j, bias && i == 0) {
        (false, _) => 0.0,
        (true, true) => 0.25,
        (true, false) => 0.05,
    });
    GaussianPrior::new(mean, cov).expect("diagonal prior is valid")
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub basis: BasisMap,
    pub w_true: DVector<f64>,
    /// Noise-free latent `φᵀw`, row-major.
    pub latent_clean: Vec<f64>,
    /// Latent with noise, row-major.
    pub latent_true: Vec<f64>,
    pub depth_true: Vec<f64>,
    pub sparse: SparseDepthSet,
    pub depth_cap: Option<f64>,
}

impl SynthScene {
    /// Flat indices of pixels eligible for sampling.
    pub fn eligible_pixels(&self) -> Vec<usize> {
        eligible(&self.depth_true, self.depth_cap)
    }
}

fn eligible(depth: &[f64], cap: Option<f64>) -> Vec<usize> {
    (0..depth.len()).filter(|&i| cap.is_none_or(|c| depth[i] < c)).collect()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable blur with clamp-to-edge borders.
fn blur(field: &[f64], height: usize, width: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; field.len()];
    for row in 0..height {
        for col in 0..width {
            tmp[row * width + col] = kernel
                .iter()
                .enumerate()
                .map(|(t, w)| w * field[row * width + clamp(col as isize + t as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; field.len()];
    for row in 0..height {
        for col in 0..width {
            out[row * width + col] = kernel
                .iter()
                .enumerate()
                .map(|(t, w)| w * tmp[clamp(row as isize + t as isize - r, height) * width + col])
                .sum();
        }
    }
    out
}

fn standardize(field: &mut [f64]) {
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let sd = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    field.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

/// First `k` entries of a uniformly random permutation of `items`.
fn partial_shuffle(items: &mut [usize], k: usize, rng: &mut ChaCha8Rng) {
    for i in 0..k.min(items.len()) {
        let j = rng.random_range(i..items.len());
        items.swap(i, j);
    }
}

fn sparse_from(order: &[usize], scene_width: usize, depth: &[f64]) -> SparseDepthSet {
    let entries =
        order.iter().map(|&i| SparseDepth { row: i / scene_width, col: i % scene_width, depth: depth[i] }).collect();
    SparseDepthSet::new(entries).expect("sampled pixels are distinct and positive")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthScene> {
    cfg.validate()?;
    let (h, w, m) = (cfg.height, cfg.width, cfg.num_bases);
    let n_px = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let kernel = gaussian_kernel(cfg.smoothness);
    let first = usize::from(cfg.bias);
    let mut values = vec![1.0; n_px * m];
    for c in first..m {
        let noise: Vec<f64> = (0..n_px).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut channel = blur(&noise, h, w, &kernel);
        standardize(&mut channel);
        for (p, v) in channel.into_iter().enumerate() {
            values[p * m + c] = v;
        }
    }
    let basis = BasisMap::new(h, w, m, cfg.bias, values)?;

    let scaled = cfg.prior.cov() / cfg.prior_alpha;
    let chol = SpdFactor::new(&scaled)?.lower();
    let eps = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
    let w_true = cfg.prior.mean() + chol * eps;

    let latent_clean: Vec<f64> =
        basis.pixels().map(|phi| phi.iter().zip(w_true.iter()).map(|(a, b)| a * b).sum()).collect();
    let latent_true: Vec<f64> = if cfg.noise_precision.is_infinite() {
        latent_clean.clone()
    } else {
        let sd = cfg.noise_precision.recip().sqrt();
        latent_clean
            .iter()
            .map(|z| {
                z + match cfg.noise_family {
                    NoiseFamily::Gaussian => {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        sd * e
                    }
                    NoiseFamily::Laplace => {
                        // variance 2b² = 1/β
                        let b = sd / std::f64::consts::SQRT_2;
                        let e: f64 = Exp1.sample(&mut rng);
                        if rng.random_bool(0.5) {
                            b * e
                        } else {
                            -b * e
                        }
                    }
                }
            })
            .collect()
    };
    let depth_true: Vec<f64> = latent_true.iter().map(|z| z.exp()).collect();
    if depth_true.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(Error::NonFinite("synthetic depth"));
    }

    let k = cfg.sparsity.count(n_px)?;
    let mut pool = eligible(&depth_true, cfg.depth_cap);
    if k > pool.len() {
        return Err(Error::Config(format!("{k} measurements requested but only {} pixels are eligible", pool.len())));
    }
    partial_shuffle(&mut pool, k, &mut rng);
    let sparse = sparse_from(&pool[..k], w, &depth_true);

    Ok(SynthScene { basis, w_true, latent_clean, latent_true, depth_true, sparse, depth_cap: cfg.depth_cap })
}

/// Nested measurement sets: every level takes a prefix of the same random
/// permutation of eligible pixels, so smaller levels are subsets of larger.
pub fn sample_sparsity_sweep(scene: &SynthScene, levels: &[Sparsity], seed: u64) -> Result<Vec<SparseDepthSet>> {
    let n_px = scene.basis.num_pixels();
    let counts = levels.iter().map(|l| l.count(n_px)).collect::<Result<Vec<_>>>()?;
    let mut pool = scene.eligible_pixels();
    let largest = counts.iter().copied().max().unwrap_or(0);
    if largest > pool.len() {
        return Err(Error::Config(format!("level {largest} exceeds the {} eligible pixels", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    partial_shuffle(&mut pool, largest, &mut rng);
    Ok(counts.iter().map(|&k| sparse_from(&pool[..k], scene.basis.width(), &scene.depth_true)).collect())
}

/// Largest systems [`brute_force_posterior`] accepts.
pub const BRUTE_FORCE_MAX_BASES: usize = 3;
pub const BRUTE_FORCE_MAX_OBS: usize = 8;

struct Joint {
    prior_cov: DMatrix<f64>,
    cross: DMatrix<f64>,
    marginal_cov: DMatrix<f64>,
    marginal_mean: DVector<f64>,
}

fn joint(sys: &RegressionSystem, prior: &GaussianPrior, alpha: f64, beta: f64) -> Result<Joint> {
    check_dim("prior dimension", sys.n_bases(), prior.dim())?;
    let (m, n) = (sys.n_bases(), sys.n_obs());
    if m > BRUTE_FORCE_MAX_BASES || n > BRUTE_FORCE_MAX_OBS {
        return Err(Error::Config(format!(
            "brute-force oracle limited to M <= {BRUTE_FORCE_MAX_BASES}, N <= {BRUTE_FORCE_MAX_OBS}; got M = {m}, N = {n}"
        )));
    }
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Hyperparameter { name: "alpha/beta", value: alpha.min(beta) });
    }
    // Joint covariance of (w, z) assembled entry by entry.
    let phi = sys.design();
    let mut full = DMatrix::zeros(m + n, m + n);
    for i in 0..m {
        for j in 0..m {
            full[(i, j)] = prior.cov()[(i, j)] / alpha;
        }
    }
    for i in 0..m {
        for a in 0..n {
            let c: f64 = (0..m).map(|k| full[(i, k)] * phi[(a, k)]).sum();
            full[(i, m + a)] = c;
            full[(m + a, i)] = c;
        }
    }
    for a in 0..n {
        for b in 0..n {
            let mut c = 0.0;
            for k in 0..m {
                for l in 0..m {
                    c += phi[(a, k)] * full[(k, l)] * phi[(b, l)];
                }
            }
            full[(m + a, m + b)] = c + if a == b { 1.0 / beta } else { 0.0 };
        }
    }
    let marginal_mean = DVector::from_fn(n, |a, _| (0..m).map(|k| phi[(a, k)] * prior.mean()[k]).sum());
    Ok(Joint {
        prior_cov: full.view((0, 0), (m, m)).into_owned(),
        cross: full.view((0, m), (m, n)).into_owned(),
        marginal_cov: full.view((m, m), (n, n)).into_owned(),
        marginal_mean,
    })
}

/// Posterior `(m, Σ)` by conditioning the joint Gaussian of `(w, z)` on the
/// observed `z`, using a general LU inverse. Independent of the precision-form
/// update used by [`crate::fitting::fit_bayes`]; meant as a test oracle.
pub fn brute_force_posterior(
    sys: &RegressionSystem,
    prior: &GaussianPrior,
    alpha: f64,
    beta: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let j = joint(sys, prior, alpha, beta)?;
    if sys.n_obs() == 0 {
        return Ok((prior.mean().clone(), j.prior_cov));
    }
    let inv = j.marginal_cov.clone().try_inverse().ok_or(Error::Conditioning { jitter: 0.0 })?;
    let gain = &j.cross * inv;
    let mean = prior.mean() + &gain * (sys.targets() - &j.marginal_mean);
    let cov = &j.prior_cov - &gain * j.cross.transpose();
    Ok((mean, cov))
}

/// `ln N(z; Φm0, ΦΣ0Φᵀ/α + I/β)` from the joint Gaussian, via LU.
pub fn brute_force_log_evidence(sys: &RegressionSystem, prior: &GaussianPrior, alpha: f64, beta: f64) -> Result<f64> {
    let j = joint(sys, prior, alpha, beta)?;
    let n = sys.n_obs();
    if n == 0 {
        return Ok(0.0);
    }
    let lu = j.marginal_cov.clone().lu();
    let det = lu.determinant();
    let r = sys.targets() - &j.marginal_mean;
    let solved = lu.solve(&r).ok_or(Error::Conditioning { jitter: 0.0 })?;
    Ok(-0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + r.dot(&solved)))
}
