use std::path::{Path, PathBuf};

use bdbf::basis::{assemble, BasisMap, SparseDepthSet};
use bdbf::io::{self, FitSummary, Report};
use bdbf::{fit_bayes, fit_ml, infer, CalibrationState, EmOptions, GaussianPrior, PredictiveField};
use clap::Args;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{usage, CliResult};
use crate::synth::parse_dtype;

/// `α` of the broad prior that reproduces the maximum-likelihood fit.
const BROAD_ALPHA: f64 = 1e-12;

/// Hyperparameter and mode flags shared by `fit` and `sweep`.
#[derive(Debug, Args, Serialize)]
pub struct FitFlags {
    /// Maximum EM iterations.
    #[arg(long)]
    em_max_iters: Option<usize>,
    /// EM stopping threshold on |Δβ|/β.
    #[arg(long)]
    em_tol: Option<f64>,
    /// Initial α (default 1).
    #[arg(long)]
    alpha0: Option<f64>,
    /// Initial β (default √N).
    #[arg(long)]
    beta0: Option<f64>,
    /// Add the noise variance 1/β to the predictive variance.
    #[arg(long)]
    include_noise: bool,
    /// Calibration file whose ε̄ rescales the predictive variance.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Maximum-likelihood fit, no prior.
    #[arg(long)]
    ml_only: bool,
    /// Bayesian fit under a near-flat prior with β from the ML fit.
    #[arg(long)]
    broad_prior: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub em_max_iters: usize,
    pub em_tol: f64,
    pub alpha0: Option<f64>,
    pub beta0: Option<f64>,
    pub include_noise: bool,
    pub calibration: Option<PathBuf>,
    pub ml_only: bool,
    pub broad_prior: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        let em = EmOptions::default();
        Self {
            em_max_iters: em.max_iters,
            em_tol: em.tol,
            alpha0: None,
            beta0: None,
            include_noise: false,
            calibration: None,
            ml_only: false,
            broad_prior: false,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> CliResult<()> {
        if self.ml_only && self.broad_prior {
            return Err(usage("--ml-only and --broad-prior are mutually exclusive"));
        }
        if self.em_max_iters == 0 {
            return Err(usage("--em-max-iters must be at least 1"));
        }
        if !(self.em_tol > 0.0 && self.em_tol.is_finite()) {
            return Err(usage(format!("--em-tol must be positive, got {}", self.em_tol)));
        }
        for (name, v) in [("--alpha0", self.alpha0), ("--beta0", self.beta0)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(usage(format!("{name} must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }

    pub fn em(&self) -> EmOptions {
        EmOptions { max_iters: self.em_max_iters, tol: self.em_tol, alpha0: self.alpha0, beta0: self.beta0 }
    }

    pub fn load_calibration(&self) -> CliResult<Option<CalibrationState>> {
        Ok(match &self.calibration {
            Some(path) => Some(io::read_calibration(path)?),
            None => None,
        })
    }

    fn mode(&self) -> &'static str {
        if self.ml_only {
            "ml"
        } else if self.broad_prior {
            "broad_prior"
        } else {
            "em"
        }
    }
}

/// Fits one scene and returns the dense latent prediction.
pub fn fit_scene(
    basis: &BasisMap,
    sparse: &SparseDepthSet,
    prior: Option<&GaussianPrior>,
    opts: &FitOptions,
    calibration: Option<&CalibrationState>,
) -> CliResult<(PredictiveField, FitSummary)> {
    let m = basis.num_bases();
    let mut summary = FitSummary {
        mode: opts.mode().to_string(),
        n_obs: sparse.len(),
        n_bases: m,
        alpha: None,
        beta: None,
        em_iters: 0,
        converged: true,
        mean_nees: calibration.map(|c| c.mean_nees),
    };
    let mut field = if opts.ml_only || opts.broad_prior {
        let sys = assemble(basis, sparse)?;
        let ml = fit_ml(&sys)?;
        if opts.ml_only {
            summary.beta = Some(ml.beta);
            let mut field = PredictiveField::from_ml(&ml, basis)?;
            if opts.include_noise {
                field.var.iter_mut().for_each(|v| *v += 1.0 / ml.beta);
            }
            field
        } else {
            let flat = GaussianPrior::isotropic(DVector::zeros(m), 1.0)?;
            let fit = fit_bayes(&sys, &flat, BROAD_ALPHA, ml.beta)?;
            summary.alpha = Some(fit.alpha);
            summary.beta = Some(fit.beta);
            PredictiveField::from_posterior(&fit, basis, opts.include_noise)?
        }
    } else {
        let prior = prior.ok_or_else(|| {
            if sparse.is_empty() {
                usage("prior required: no measurements, pass --prior")
            } else {
                usage("prior required: pass --prior, or use --ml-only or --broad-prior")
            }
        })?;
        let inf = infer(basis, sparse, prior, &opts.em(), opts.include_noise)?;
        match &inf.fit {
            Some(fit) => {
                summary.alpha = Some(fit.alpha);
                summary.beta = Some(fit.beta);
                summary.em_iters = fit.em_iters;
                summary.converged = fit.converged;
            }
            None => summary.mode = "prior_only".into(),
        }
        inf.field
    };
    if let Some(c) = calibration {
        field.scale_variance(c.apply(1.0)?);
    }
    Ok((field, summary))
}

/// Stores μ and σ² as the two channels of a basis-format map.
pub fn field_to_map(field: &PredictiveField) -> CliResult<BasisMap> {
    let values = field.mean.iter().zip(&field.var).flat_map(|(&m, &v)| [m, v]).collect();
    Ok(BasisMap::new(field.height, field.width, 2, false, values)?)
}

pub fn map_to_field(map: &BasisMap, path: &Path) -> CliResult<PredictiveField> {
    if map.num_bases() != 2 || map.has_bias() {
        return Err(usage(format!("{}: expected a prediction map with channels (mean, variance)", path.display())));
    }
    let (mean, var) = map.pixels().map(|p| (p[0], p[1])).unzip();
    Ok(PredictiveField { height: map.height(), width: map.width(), mean, var })
}

/// File stem with a trailing `_suffix` removed: `scene_3_sparse.csv` → `scene_3`.
pub fn scene_name(path: &Path, suffix: &str) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scene".into());
    stem.strip_suffix(suffix).filter(|s| !s.is_empty()).map(str::to_string).unwrap_or(stem)
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Basis map (.bdbf).
    #[arg(long)]
    basis: Option<PathBuf>,
    /// Sparse depth measurements (.csv).
    #[arg(long)]
    sparse: Option<PathBuf>,
    /// Shared prior (.json).
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output file prefix; defaults to the sparse file name.
    #[arg(long)]
    name: Option<String>,
    #[arg(long, value_parser = ["f32", "f64"])]
    dtype: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    fit: FitFlags,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct FitRun {
    basis: Option<PathBuf>,
    sparse: Option<PathBuf>,
    prior: Option<PathBuf>,
    out: Option<PathBuf>,
    name: Option<String>,
    dtype: String,
    #[serde(flatten)]
    fit: FitOptions,
}

impl Default for FitRun {
    fn default() -> Self {
        Self {
            basis: None,
            sparse: None,
            prior: None,
            out: None,
            name: None,
            dtype: "f64".into(),
            fit: FitOptions::default(),
        }
    }
}

pub fn run(args: &FitArgs) -> CliResult<()> {
    let (run, echo): (FitRun, _) = config::resolve(args.config.as_deref(), args)?;
    let basis_path = run.basis.as_ref().ok_or_else(|| usage("fit needs --basis"))?;
    let sparse_path = run.sparse.as_ref().ok_or_else(|| usage("fit needs --sparse"))?;
    let out = run.out.as_ref().ok_or_else(|| usage("fit needs --out"))?;
    let dtype = parse_dtype(&run.dtype)?;
    run.fit.validate()?;
    if run.fit.ml_only && run.prior.is_some() {
        return Err(usage("--ml-only does not use a prior; drop --prior"));
    }

    let basis = io::read_basis(basis_path)?;
    let sparse = io::read_sparse(sparse_path)?;
    let prior = run.prior.as_deref().map(io::read_prior).transpose()?;
    let calibration = run.fit.load_calibration()?;
    let (field, summary) = fit_scene(&basis, &sparse, prior.as_ref(), &run.fit, calibration.as_ref())?;

    let name = run.name.clone().unwrap_or_else(|| scene_name(sparse_path, "_sparse"));
    std::fs::create_dir_all(out).map_err(|source| bdbf::Error::Io { path: out.clone(), source })?;
    let pred_path = out.join(format!("{name}_pred.bdbf"));
    let report_path = out.join(format!("{name}_fit.json"));
    io::write_basis(&field_to_map(&field)?, &pred_path, dtype)?;
    let report = Report { config: echo, fit: Some(summary), metrics: None, curves: Default::default() };
    io::write_report(&report, &report_path)?;
    crate::emit(&format!("{}\n{}", pred_path.display(), report_path.display()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_names() {
        assert_eq!(scene_name(Path::new("out/scene_3_sparse.csv"), "_sparse"), "scene_3");
        assert_eq!(scene_name(Path::new("points.csv"), "_sparse"), "points");
        assert_eq!(scene_name(Path::new("_sparse.csv"), "_sparse"), "_sparse");
    }

    #[test]
    fn prediction_map_round_trip() {
        let field = PredictiveField { height: 1, width: 2, mean: vec![1.0, 2.0], var: vec![0.5, 0.25] };
        let map = field_to_map(&field).unwrap();
        assert_eq!(map.values(), &[1.0, 0.5, 2.0, 0.25]);
        assert_eq!(map_to_field(&map, Path::new("p")).unwrap(), field);
    }

    #[test]
    fn conflicting_modes_rejected() {
        let opts = FitOptions { ml_only: true, broad_prior: true, ..FitOptions::default() };
        assert!(opts.validate().is_err());
        let opts = FitOptions { em_tol: 0.0, ..FitOptions::default() };
        assert!(opts.validate().is_err());
    }
}
