use std::fmt::Write as _;
use std::path::PathBuf;

use bdbf::io;
use bdbf::synth::{self, Sparsity};
use bdbf::GaussianPrior;
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{self, parse_levels};
use crate::error::{usage, CliResult};
use crate::eval::{evaluate, EvalFlags, EvalOptions};
use crate::fit::{fit_scene, FitFlags, FitOptions};
use crate::synth::{SceneFlags, SceneOptions};

pub const HEADER: &str = "seed,level,n_obs,mode,alpha,beta,em_iters,converged,mae,rmse,delta1,ause,auce,nll";

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    /// CSV file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// First scene seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds.
    #[arg(long)]
    count: Option<u64>,
    /// Comma-separated sparsity levels, e.g. "5%,1%,500,50,0".
    #[arg(long, value_delimiter = ',')]
    levels: Vec<String>,
    /// Shared prior; defaults to the generating prior of the scenes.
    #[arg(long)]
    prior: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    scene: SceneFlags,
    #[command(flatten)]
    #[serde(flatten)]
    fit: FitFlags,
    #[command(flatten)]
    #[serde(flatten)]
    eval: EvalFlags,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SweepRun {
    out: Option<PathBuf>,
    seed: u64,
    count: u64,
    levels: Vec<Value>,
    prior: Option<PathBuf>,
    #[serde(flatten)]
    scene: SceneOptions,
    #[serde(flatten)]
    fit: FitOptions,
    #[serde(flatten)]
    eval: EvalOptions,
}

impl Default for SweepRun {
    fn default() -> Self {
        Self {
            out: None,
            seed: 0,
            count: 5,
            levels: ["500", "250", "50", "0"].map(|s| Value::String(s.into())).to_vec(),
            prior: None,
            scene: SceneOptions::default(),
            fit: FitOptions::default(),
            eval: EvalOptions::default(),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn run_seed(run: &SweepRun, seed: u64, levels: &[Sparsity], prior: &GaussianPrior) -> CliResult<Vec<(String, f64)>> {
    let scene = synth::generate(&run.scene.scene_config(seed, Sparsity::Count(0)))?;
    let sets = synth::sample_sparsity_sweep(&scene, levels, seed)?;
    let calibration = run.fit.load_calibration()?;
    levels
        .par_iter()
        .zip(sets.par_iter())
        .map(|(level, sparse)| {
            let (field, fit) = fit_scene(&scene.basis, sparse, Some(prior), &run.fit, calibration.as_ref())?;
            let m = evaluate(&field, &scene.depth_true, &run.eval)?.metrics;
            let row = format!(
                "{seed},{level},{},{},{},{},{},{},{},{},{},{},{},{}",
                fit.n_obs,
                fit.mode,
                opt(fit.alpha),
                opt(fit.beta),
                fit.em_iters,
                fit.converged,
                m.mae,
                m.rmse,
                m.delta1,
                m.ause,
                m.auce,
                m.nll
            );
            Ok((row, m.mae))
        })
        .collect()
}

pub fn run(args: &SweepArgs) -> CliResult<()> {
    let (run, _): (SweepRun, _) = config::resolve(args.config.as_deref(), args)?;
    let out = run.out.as_ref().ok_or_else(|| usage("sweep needs --out"))?;
    let levels = parse_levels(&run.levels)?;
    if run.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    run.fit.validate()?;
    let prior = match &run.prior {
        Some(path) => io::read_prior(path)?,
        None => run.scene.generating_prior(),
    };

    let seeds: Vec<u64> = (run.seed..run.seed + run.count).collect();
    let results = seeds.par_iter().map(|&seed| run_seed(&run, seed, &levels, &prior)).collect::<CliResult<Vec<_>>>()?;

    let mut csv = format!("{HEADER}\n");
    let mut mean_mae = vec![0.0; levels.len()];
    for rows in &results {
        for (i, (row, mae)) in rows.iter().enumerate() {
            csv.push_str(row);
            csv.push('\n');
            mean_mae[i] += mae / seeds.len() as f64;
        }
    }
    io::write_atomic(out, csv.as_bytes())?;

    let mut summary = String::from("level,mean_mae\n");
    for (level, mae) in levels.iter().zip(&mean_mae) {
        let _ = writeln!(summary, "{level},{mae}");
    }
    crate::emit(summary.trim_end());
    Ok(())
}
