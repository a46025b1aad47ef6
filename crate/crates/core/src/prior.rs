//! Shared-prior estimation from per-image maximum-likelihood weights.
//!
//! Weights are accumulated as a running mean and centered scatter matrix,
//! combined with the pairwise update of Chan et al. so that accumulators built
//! on different threads can be merged in any order.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::fitting::GaussianPrior;
use crate::linalg::symmetrize;

/// Relative ridge added to the sample covariance, `λ = 1e-6 · tr(S)/M`.
pub const SHRINKAGE: f64 = 1e-6;
/// Absolute lower bound on the ridge for zero-spread epochs.
pub const SHRINKAGE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PriorAccumulator {
    count: usize,
    mean: DVector<f64>,
    scatter: DMatrix<f64>,
}

impl PriorAccumulator {
    pub fn new(dim: usize) -> Self {
        Self { count: 0, mean: DVector::zeros(dim), scatter: DMatrix::zeros(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Sum of outer products of centered samples.
    pub fn scatter(&self) -> &DMatrix<f64> {
        &self.scatter
    }

    pub fn accumulate(&mut self, w: &[f64]) -> Result<()> {
        check_dim("weight sample", self.dim(), w.len())?;
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("weight sample"));
        }
        let single = Self { count: 1, mean: DVector::from_column_slice(w), scatter: DMatrix::zeros(w.len(), w.len()) };
        *self = self.merge(&single)?;
        Ok(())
    }

    /// Combines two accumulators as if their samples had been fed to one.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        check_dim("accumulator", self.dim(), other.dim())?;
        if other.count == 0 {
            return Ok(self.clone());
        }
        if self.count == 0 {
            return Ok(other.clone());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let mean = (&self.mean * na + &other.mean * nb) / n;
        let delta = &other.mean - &self.mean;
        let scatter = &self.scatter + &other.scatter + &delta * delta.transpose() * (na * nb / n);
        Ok(Self { count: self.count + other.count, mean, scatter })
    }

    /// Sample mean and unbiased covariance with a small ridge so the result is
    /// always positive definite.
    pub fn finalize(&self) -> Result<GaussianPrior> {
        if self.count < 2 {
            return Err(Error::InsufficientSamples { needed: 2, count: self.count });
        }
        let m = self.dim();
        let mut cov = symmetrize(&self.scatter / (self.count - 1) as f64);
        let ridge = (SHRINKAGE * cov.trace() / m as f64).max(SHRINKAGE_FLOOR);
        for i in 0..m {
            cov[(i, i)] += ridge;
        }
        GaussianPrior::new(self.mean.clone(), cov)
    }
}
