use std::path::PathBuf;

use bdbf::io;
use bdbf::CalibrationState;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{usage, CliResult};
use crate::eval::read_truth;
use crate::fit::map_to_field;

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    /// Prediction maps, one per scene.
    #[arg(long, num_args = 1..)]
    pred: Vec<PathBuf>,
    /// Ground-truth maps, paired with --pred in order.
    #[arg(long, num_args = 1..)]
    truth: Vec<PathBuf>,
    /// Calibration file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct CalibrateRun {
    pred: Vec<PathBuf>,
    truth: Vec<PathBuf>,
    out: Option<PathBuf>,
}

pub fn run(args: &CalibrateArgs) -> CliResult<()> {
    let (run, _): (CalibrateRun, _) = config::resolve(args.config.as_deref(), args)?;
    let out = run.out.as_ref().ok_or_else(|| usage("calibrate needs --out"))?;
    if run.pred.is_empty() {
        return Err(usage("calibrate needs at least one --pred/--truth pair"));
    }
    if run.pred.len() != run.truth.len() {
        return Err(usage(format!("{} predictions but {} ground truths", run.pred.len(), run.truth.len())));
    }

    let mut total: Option<CalibrationState> = None;
    for (pred, truth) in run.pred.iter().zip(&run.truth) {
        let field = map_to_field(&io::read_basis(pred)?, pred)?;
        let depth = read_truth(truth)?;
        if depth.len() != field.len() {
            return Err(usage(format!("{} and {} differ in size", pred.display(), truth.display())));
        }
        let (mut mu, mut var, mut z) = (Vec::new(), Vec::new(), Vec::new());
        for (i, d) in depth.iter().enumerate() {
            if *d > 0.0 && d.is_finite() {
                mu.push(field.mean[i]);
                var.push(field.var[i]);
                z.push(d.ln());
            }
        }
        let state = CalibrationState::measure_from_variance(&mu, &var, &z)?;
        total = Some(match total {
            Some(t) => t.merge(&state),
            None => state,
        });
    }
    let state = total.expect("at least one scene");
    io::write_calibration(&state, out)?;
    crate::emit(&serde_json::to_string_pretty(&state).expect("calibration serializes"));
    Ok(())
}
