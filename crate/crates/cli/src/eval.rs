use std::collections::BTreeMap;
use std::path::PathBuf;

use bdbf::io::{self, MetricsSummary, Report};
use bdbf::metrics::{self, BaseMetric, CalibrationCurve, CurveData, ErrorSpace, EvalSet, Sparsification};
use bdbf::PredictiveField;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{usage, CliResult};
use crate::fit::{map_to_field, scene_name};

#[derive(Debug, Args, Serialize)]
pub struct EvalFlags {
    /// Space in which sparsification errors are measured.
    #[arg(long, value_parser = ["latent", "depth"])]
    ause_space: Option<String>,
    /// Error metric of the sparsification curve.
    #[arg(long, value_parser = ["mae", "rmse"])]
    ause_metric: Option<String>,
    /// Sparsification removal step.
    #[arg(long)]
    step: Option<f64>,
    /// Number of nominal coverages on the calibration curve.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub ause_space: ErrorSpace,
    pub ause_metric: BaseMetric,
    pub step: f64,
    pub grid: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { ause_space: ErrorSpace::Latent, ause_metric: BaseMetric::Mae, step: 0.01, grid: 100 }
    }
}

pub struct Evaluation {
    pub metrics: MetricsSummary,
    pub sparsification: Sparsification,
    pub calibration: CalibrationCurve,
}

pub fn evaluate(field: &PredictiveField, true_depth: &[f64], opts: &EvalOptions) -> CliResult<Evaluation> {
    let set = EvalSet::from_field(field, true_depth)?;
    let depth = metrics::depth_metrics(&set)?;
    let sparsification = metrics::ause(&set, opts.ause_metric, opts.step, opts.ause_space)?;
    let calibration = metrics::auce(&set, opts.grid)?;
    let nll = metrics::nll(&set)?;
    Ok(Evaluation {
        metrics: MetricsSummary {
            mae: depth.mae,
            rmse: depth.rmse,
            delta1: depth.delta1,
            ause: sparsification.ause,
            auce: calibration.auce,
            nll,
        },
        sparsification,
        calibration,
    })
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Prediction map written by `fit`.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Ground-truth depth map (one channel, meters).
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output file prefix; defaults to the prediction file name.
    #[arg(long)]
    name: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    eval: EvalFlags,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct EvalRun {
    pred: Option<PathBuf>,
    truth: Option<PathBuf>,
    out: Option<PathBuf>,
    name: Option<String>,
    #[serde(flatten)]
    eval: EvalOptions,
}

pub fn read_truth(path: &std::path::Path) -> CliResult<Vec<f64>> {
    let map = io::read_basis(path)?;
    if map.num_bases() != 1 {
        return Err(usage(format!("{}: ground truth must have exactly one channel", path.display())));
    }
    Ok(map.into_values())
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let (run, echo): (EvalRun, _) = config::resolve(args.config.as_deref(), args)?;
    let pred_path = run.pred.as_ref().ok_or_else(|| usage("eval needs --pred"))?;
    let truth_path = run.truth.as_ref().ok_or_else(|| usage("eval needs --truth"))?;
    let out = run.out.as_ref().ok_or_else(|| usage("eval needs --out"))?;

    let field = map_to_field(&io::read_basis(pred_path)?, pred_path)?;
    let truth = read_truth(truth_path)?;
    if truth.len() != field.len() {
        return Err(usage(format!("prediction has {} pixels but ground truth has {}", field.len(), truth.len())));
    }
    let ev = evaluate(&field, &truth, &run.eval)?;

    let name = run.name.clone().unwrap_or_else(|| scene_name(pred_path, "_pred"));
    std::fs::create_dir_all(out).map_err(|source| bdbf::Error::Io { path: out.clone(), source })?;
    let coverage = CurveData::new("p", "p_hat", ev.calibration.p.clone(), ev.calibration.p_hat.clone())?;
    let mut curves = BTreeMap::new();
    for (key, curve) in [
        ("sparsification", ev.sparsification.method_curve()),
        ("oracle", ev.sparsification.oracle_curve()),
        ("calibration", coverage),
    ] {
        let path = out.join(format!("{name}_{key}.csv"));
        io::write_curve(&curve, &path)?;
        curves.insert(key.to_string(), path);
    }
    let report_path = out.join(format!("{name}_eval.json"));
    let report = Report { config: echo, fit: None, metrics: Some(ev.metrics), curves };
    io::write_report(&report, &report_path)?;
    crate::emit(&serde_json::to_string_pretty(&ev.metrics).expect("metrics serialize"));
    Ok(())
}
