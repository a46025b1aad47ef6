use std::path::PathBuf;

use bdbf::basis::assemble;
use bdbf::{fit_ml, io, PriorAccumulator};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{usage, CliResult};

#[derive(Debug, Args, Serialize)]
pub struct PriorArgs {
    /// Training basis maps.
    #[arg(long, num_args = 1..)]
    basis: Vec<PathBuf>,
    /// Training measurements, paired with --basis in order.
    #[arg(long, num_args = 1..)]
    sparse: Vec<PathBuf>,
    /// Prior file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct PriorRun {
    basis: Vec<PathBuf>,
    sparse: Vec<PathBuf>,
    out: Option<PathBuf>,
}

/// Estimates the shared prior as the mean and covariance of per-scene
/// maximum-likelihood weights.
pub fn run(args: &PriorArgs) -> CliResult<()> {
    let (run, _): (PriorRun, _) = config::resolve(args.config.as_deref(), args)?;
    let out = run.out.as_ref().ok_or_else(|| usage("prior needs --out"))?;
    if run.basis.len() != run.sparse.len() {
        return Err(usage(format!("{} basis maps but {} sparse files", run.basis.len(), run.sparse.len())));
    }
    if run.basis.len() < 2 {
        return Err(usage("prior needs at least two training scenes"));
    }
    let mut acc: Option<PriorAccumulator> = None;
    for (b, s) in run.basis.iter().zip(&run.sparse) {
        let basis = io::read_basis(b)?;
        let fit = fit_ml(&assemble(&basis, &io::read_sparse(s)?)?)?;
        acc.get_or_insert_with(|| PriorAccumulator::new(basis.num_bases())).accumulate(fit.weights.as_slice())?;
    }
    let prior = acc.expect("at least two scenes").finalize()?;
    io::write_prior(&prior, out)?;
    crate::emit(&out.display().to_string());
    Ok(())
}
