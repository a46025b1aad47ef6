//! Basis maps, sparse depth measurements and design-matrix assembly.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Measurements shallower than this are rejected rather than clamped.
pub const MIN_DEPTH: f64 = 1e-6;

/// Per-pixel `M`-channel feature field, stored pixel-major with the channels
/// of one pixel contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMap {
    height: usize,
    width: usize,
    num_bases: usize,
    has_bias: bool,
    values: Vec<f64>,
}

impl BasisMap {
    pub fn new(height: usize, width: usize, num_bases: usize, has_bias: bool, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || num_bases == 0 {
            return Err(Error::InvalidBasis(format!("dimensions must be positive, got {height}x{width}x{num_bases}")));
        }
        let expected = height * width * num_bases;
        if values.len() != expected {
            return Err(Error::Dimension { what: "basis values", expected, found: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("basis values"));
        }
        if has_bias && values.chunks_exact(num_bases).any(|px| px[0] != 1.0) {
            return Err(Error::InvalidBasis("bias channel is not identically one".into()));
        }
        Ok(Self { height, width, num_bases, has_bias, values })
    }

    /// Builds a map by evaluating `f(row, col, channel)` at every entry.
    pub fn from_fn(
        height: usize,
        width: usize,
        num_bases: usize,
        has_bias: bool,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * num_bases);
        for r in 0..height {
            for c in 0..width {
                for k in 0..num_bases {
                    values.push(f(r, c, k));
                }
            }
        }
        Self::new(height, width, num_bases, has_bias, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn num_bases(&self) -> usize {
        self.num_bases
    }

    pub fn has_bias(&self) -> bool {
        self.has_bias
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Basis vector of one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.num_bases;
        &self.values[start..start + self.num_bases]
    }

    /// Basis vector of the pixel with flat index `row * width + col`.
    pub fn pixel_flat(&self, index: usize) -> &[f64] {
        &self.values[index * self.num_bases..(index + 1) * self.num_bases]
    }

    pub fn pixels(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.values.chunks_exact(self.num_bases)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseDepth {
    pub row: usize,
    pub col: usize,
    /// Metric depth in meters.
    pub depth: f64,
}

/// Sparse depth measurements; positive depths, at most one per pixel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseDepthSet {
    entries: Vec<SparseDepth>,
}

impl SparseDepthSet {
    pub fn new(entries: Vec<SparseDepth>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !(e.depth.is_finite() && e.depth >= MIN_DEPTH) {
                return Err(Error::Measurement { row: e.row, col: e.col, depth: e.depth });
            }
            if !seen.insert((e.row, e.col)) {
                return Err(Error::DuplicatePixel { row: e.row, col: e.col });
            }
        }
        Ok(Self { entries })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[SparseDepth] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Design matrix `Φ` (one row per measurement), log-depth targets `z` and the
/// pixel each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionSystem {
    design: DMatrix<f64>,
    targets: DVector<f64>,
    pixel_index: Vec<(usize, usize)>,
}

impl RegressionSystem {
    /// Wraps an explicit system. `pixel_index` is left empty.
    pub fn from_parts(design: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        if design.nrows() != targets.len() {
            return Err(Error::Dimension { what: "targets", expected: design.nrows(), found: targets.len() });
        }
        if design.ncols() == 0 {
            return Err(Error::InvalidBasis("design matrix has no columns".into()));
        }
        if design.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("regression system"));
        }
        Ok(Self { design, targets, pixel_index: Vec::new() })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn pixel_index(&self) -> &[(usize, usize)] {
        &self.pixel_index
    }

    pub fn n_obs(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_bases(&self) -> usize {
        self.design.ncols()
    }
}

/// Extracts the basis rows at the measured pixels and log-transforms depths.
/// Row order follows the measurement order.
pub fn assemble(basis: &BasisMap, sparse: &SparseDepthSet) -> Result<RegressionSystem> {
    let n = sparse.len();
    let m = basis.num_bases();
    let mut design = DMatrix::zeros(n, m);
    let mut targets = DVector::zeros(n);
    let mut pixel_index = Vec::with_capacity(n);
    let mut seen = HashSet::with_capacity(n);
    for (i, e) in sparse.entries().iter().enumerate() {
        if e.row >= basis.height() || e.col >= basis.width() {
            return Err(Error::Coordinate { row: e.row, col: e.col, height: basis.height(), width: basis.width() });
        }
        if !(e.depth.is_finite() && e.depth >= MIN_DEPTH) {
            return Err(Error::Measurement { row: e.row, col: e.col, depth: e.depth });
        }
        if !seen.insert((e.row, e.col)) {
            return Err(Error::DuplicatePixel { row: e.row, col: e.col });
        }
        for (k, v) in basis.pixel(e.row, e.col).iter().enumerate() {
            design[(i, k)] = *v;
        }
        targets[i] = e.depth.ln();
        pixel_index.push((e.row, e.col));
    }
    Ok(RegressionSystem { design, targets, pixel_index })
}

pub fn latent_to_depth(z: f64) -> f64 {
    z.exp()
}

pub fn depth_to_latent(depth: f64) -> Result<f64> {
    if depth.is_finite() && depth > 0.0 {
        Ok(depth.ln())
    } else {
        Err(Error::Domain(depth))
    }
}
