//! Bayesian basis fitting for depth completion.
//!
//! A basis network (external to this crate) produces an `M`-channel feature
//! map per image. Depth is modelled in log space as a linear combination of
//! those channels, and the combination weights are inferred per image from a
//! handful of sparse depth measurements under a Gaussian prior shared across
//! the dataset. The result is a dense latent mean and variance per pixel.
//!
//! Modules, bottom-up:
//!
//! * [`basis`]: basis maps, sparse measurements, design-matrix assembly.
//! * [`linalg`]: SPD factorization with a jitter ladder.
//! * [`fitting`]: ML and conjugate posterior fits, predictive moments,
//!   EM hyperparameter estimation and the log evidence.
//! * [`prior`]: shared-prior estimation from per-image ML weights.
//! * [`calibration`]: NEES-based variance rescaling and Laplace scales.
//! * [`metrics`]: depth accuracy, AUSE, AUCE, NLL and ensemble baselines.
//! * [`synth`]: deterministic synthetic scenes and a brute-force posterior.
//! * [`io`]: on-disk formats for all of the above.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod calibration;
pub mod error;
pub mod fitting;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod prior;
pub mod synth;

pub use basis::{assemble, depth_to_latent, latent_to_depth, BasisMap, RegressionSystem, SparseDepthSet};
pub use calibration::{laplace_scale, nees, CalibrationState};
pub use error::{Error, ErrorKind, Result};
pub use fitting::{
    fit_bayes, fit_em, fit_ml, infer, log_evidence, predict, predict_ml, predict_prior, EmOptions, GaussianPrior,
    Inference, MlFit, PosteriorFit, Prediction, PredictiveField,
};
pub use prior::PriorAccumulator;
