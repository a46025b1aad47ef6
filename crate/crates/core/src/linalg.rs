//! Small dense symmetric positive-definite helpers.
//!
//! Every solve in the fitting code goes through [`SpdFactor`]. If the plain
//! Cholesky factorization fails, a diagonal jitter of `1e-12 * tr(A) / M` is
//! added and escalated by factors of ten up to `1e-6 * tr(A) / M` before the
//! matrix is declared ill-conditioned.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const JITTER_START: f64 = 1e-12;
const JITTER_STOP: f64 = 1e-6;

/// Cholesky factor of `A + jitter * I`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl SpdFactor {
    /// Factorizes `a`, escalating diagonal jitter as needed.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension { what: "square matrix", expected: a.nrows(), found: a.ncols() });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix to factorize"));
        }
        if let Some(chol) = Cholesky::new(a.clone()) {
            return Ok(Self { chol, jitter: 0.0 });
        }
        let n = a.nrows().max(1) as f64;
        let scale = a.trace() / n;
        if !(scale > 0.0) {
            return Err(Error::Conditioning { jitter: 0.0 });
        }
        let mut rel = JITTER_START;
        let mut last = 0.0;
        while rel <= JITTER_STOP * (1.0 + 1e-9) {
            last = rel * scale;
            let mut shifted = a.clone();
            for i in 0..a.nrows() {
                shifted[(i, i)] += last;
            }
            if let Some(chol) = Cholesky::new(shifted) {
                return Ok(Self { chol, jitter: last });
            }
            rel *= 10.0;
        }
        Err(Error::Conditioning { jitter: last })
    }

    /// Diagonal shift that was needed; zero when the plain factorization succeeded.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Inverse, symmetrized to remove round-off asymmetry.
    pub fn inverse(&self) -> DMatrix<f64> {
        symmetrize(self.chol.inverse())
    }

    pub fn ln_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// Returns `vᵀ A⁻¹ v`.
    pub fn inv_quad(&self, v: &DVector<f64>) -> f64 {
        let l = self.chol.l();
        let y = l.solve_lower_triangular(v).expect("cholesky factor has a positive diagonal");
        y.norm_squared()
    }

    /// Lower-triangular factor `L` with `L Lᵀ = A + jitter * I`.
    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

/// Ratio of extreme eigenvalues of a symmetric matrix; infinite when singular.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let eig = a.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let n = a.nrows();
    (0..n).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= tol))
}

pub fn symmetrize(a: DMatrix<f64>) -> DMatrix<f64> {
    (&a + a.transpose()) * 0.5
}
