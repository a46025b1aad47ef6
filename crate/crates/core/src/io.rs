//! File formats.
//!
//! * Basis maps (and dense prediction / truth maps, which reuse the container)
//!   are binary: a 26-byte little-endian header followed by the payload.
//!
//!   | offset | size | field                                   |
//!   |--------|------|-----------------------------------------|
//!   | 0      | 4    | magic `BDBF`                            |
//!   | 4      | 4    | format version (`u32`, currently 1)     |
//!   | 8      | 4    | height `H` (`u32`)                      |
//!   | 12     | 4    | width `W` (`u32`)                       |
//!   | 16     | 4    | channels `M` (`u32`)                    |
//!   | 20     | 1    | bias flag (0 or 1)                      |
//!   | 21     | 1    | dtype (0 = f32, 1 = f64)                |
//!   | 22     | 4    | CRC-32 of bytes 0..22                   |
//!   | 26     | …    | values, index `((row·W)+col)·M+channel` |
//!
//! * Sparse depths are UTF-8 text, one `row,col,depth` record per line, with
//!   `#` comments and blank lines ignored.
//! * Priors, calibration states and reports are JSON.
//! * Curves are two-column CSV with a header.
//!
//! Every writer goes through a temporary file in the destination directory
//! followed by a rename, so a failed write never leaves a partial file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisMap, SparseDepth, SparseDepthSet, MIN_DEPTH};
use crate::calibration::CalibrationState;
use crate::error::{Error, Result};
use crate::fitting::GaussianPrior;
use crate::metrics::CurveData;

pub const MAGIC: &[u8; 4] = b"BDBF";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 26;
const CHECKED_LEN: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn size(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

/// Writes `bytes` to `path` through a temporary file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

pub fn encode_basis(map: &BasisMap, dtype: Dtype) -> Vec<u8> {
    let payload = map.values().len() * dtype.size() as usize;
    let mut out = Vec::with_capacity(HEADER_LEN + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for dim in [map.height(), map.width(), map.num_bases()] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.push(u8::from(map.has_bias()));
    out.push(dtype.tag());
    let crc = crc32fast::hash(&out[..CHECKED_LEN]);
    out.extend_from_slice(&crc.to_le_bytes());
    match dtype {
        Dtype::F32 => map.values().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Dtype::F64 => map.values().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

/// Decodes a basis container; `path` is only used in error messages.
pub fn decode_basis(bytes: &[u8], path: &Path) -> Result<BasisMap> {
    let path_buf = || path.to_path_buf();
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { path: path_buf(), expected: HEADER_LEN as u64, found: bytes.len() as u64 });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { path: path_buf() });
    }
    let stored = le_u32(bytes, CHECKED_LEN);
    let computed = crc32fast::hash(&bytes[..CHECKED_LEN]);
    if stored != computed {
        return Err(Error::Checksum { path: path_buf(), stored, computed });
    }
    let version = le_u32(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::Version { path: path_buf(), version });
    }
    let (h, w, m) = (le_u32(bytes, 8) as u64, le_u32(bytes, 12) as u64, le_u32(bytes, 16) as u64);
    let bias = match bytes[20] {
        0 => false,
        1 => true,
        other => return Err(Error::InvalidBasis(format!("bias flag {other} is neither 0 nor 1"))),
    };
    let dtype = match bytes[21] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        tag => return Err(Error::Dtype { path: path_buf(), tag }),
    };
    let count = h.checked_mul(w).and_then(|v| v.checked_mul(m));
    let expected = count.and_then(|c| c.checked_mul(dtype.size())).and_then(|p| p.checked_add(HEADER_LEN as u64));
    let found = bytes.len() as u64;
    if expected != Some(found) {
        return Err(Error::Truncated { path: path_buf(), expected: expected.unwrap_or(u64::MAX), found });
    }
    let payload = &bytes[HEADER_LEN..];
    let values: Vec<f64> = match dtype {
        Dtype::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        Dtype::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
    };
    BasisMap::new(h as usize, w as usize, m as usize, bias, values)
}

pub fn write_basis(map: &BasisMap, path: &Path, dtype: Dtype) -> Result<()> {
    write_atomic(path, &encode_basis(map, dtype))
}

pub fn read_basis(path: &Path) -> Result<BasisMap> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_basis(&bytes, path)
}

pub fn format_sparse(set: &SparseDepthSet) -> String {
    let mut out = String::from("# row,col,depth_m\n");
    for e in set.entries() {
        out.push_str(&format!("{},{},{}\n", e.row, e.col, e.depth));
    }
    out
}

pub fn parse_sparse(text: &str, path: &Path) -> Result<SparseDepthSet> {
    let mut entries = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fail = |message: String| Error::Parse { path: path.to_path_buf(), line: line_no, message };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(fail(format!("expected 3 comma-separated fields, found {}", fields.len())));
        }
        let row: usize = fields[0].parse().map_err(|_| fail(format!("invalid row {:?}", fields[0])))?;
        let col: usize = fields[1].parse().map_err(|_| fail(format!("invalid column {:?}", fields[1])))?;
        let depth: f64 = fields[2].parse().map_err(|_| fail(format!("invalid depth {:?}", fields[2])))?;
        if !(depth.is_finite() && depth >= MIN_DEPTH) {
            return Err(fail(format!("depth {depth} is not a positive measurement")));
        }
        if let Some(first) = seen.insert((row, col), line_no) {
            return Err(fail(format!("pixel ({row}, {col}) already measured on line {first}")));
        }
        entries.push(SparseDepth { row, col, depth });
    }
    SparseDepthSet::new(entries)
}

pub fn write_sparse(set: &SparseDepthSet, path: &Path) -> Result<()> {
    write_atomic(path, format_sparse(set).as_bytes())
}

pub fn read_sparse(path: &Path) -> Result<SparseDepthSet> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_sparse(&text, path)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorFile {
    pub num_bases: usize,
    pub m0: Vec<f64>,
    /// Row-major `M×M`.
    pub sigma0: Vec<f64>,
}

impl From<&GaussianPrior> for PriorFile {
    fn from(prior: &GaussianPrior) -> Self {
        let m = prior.dim();
        Self {
            num_bases: m,
            m0: prior.mean().iter().copied().collect(),
            sigma0: (0..m).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| prior.cov()[(i, j)]).collect(),
        }
    }
}

impl PriorFile {
    pub fn to_prior(&self) -> Result<GaussianPrior> {
        let m = self.num_bases;
        if self.m0.len() != m || self.sigma0.len() != m * m {
            return Err(Error::InvalidPrior(format!(
                "num_bases {m} but m0 has {} entries and sigma0 has {}",
                self.m0.len(),
                self.sigma0.len()
            )));
        }
        GaussianPrior::new(DVector::from_column_slice(&self.m0), DMatrix::from_row_slice(m, m, &self.sigma0))
    }
}

pub fn write_prior(prior: &GaussianPrior, path: &Path) -> Result<()> {
    write_json(&PriorFile::from(prior), path)
}

/// Reads and re-validates a prior (symmetry and positive definiteness).
pub fn read_prior(path: &Path) -> Result<GaussianPrior> {
    read_json::<PriorFile>(path)?.to_prior()
}

pub fn write_calibration(state: &CalibrationState, path: &Path) -> Result<()> {
    write_json(state, path)
}

pub fn read_calibration(path: &Path) -> Result<CalibrationState> {
    let state: CalibrationState = read_json(path)?;
    if !(state.mean_nees.is_finite() && state.mean_nees > 0.0) || state.n_pixels == 0 {
        return Err(Error::Config(format!("{}: calibration state has no usable mean NEES", path.display())));
    }
    Ok(state)
}

pub fn write_curve(curve: &CurveData, path: &Path) -> Result<()> {
    write_atomic(path, curve.to_csv().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    /// `em`, `prior_only`, `ml` or `broad_prior`.
    pub mode: String,
    pub n_obs: usize,
    pub n_bases: usize,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub em_iters: usize,
    pub converged: bool,
    /// Calibration factor applied to the variances, if any.
    pub mean_nees: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub mae: f64,
    pub rmse: f64,
    pub delta1: f64,
    pub ause: f64,
    pub auce: f64,
    pub nll: f64,
}

/// Run report: the resolved configuration, what was fitted, what was
/// measured, and where the curves went.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Report {
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsSummary>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub curves: BTreeMap<String, PathBuf>,
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    write_json(report, path)
}

pub fn read_report(path: &Path) -> Result<Report> {
    read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    fn sample_map() -> BasisMap {
        BasisMap::from_fn(3, 4, 2, true, |r, c, k| if k == 0 { 1.0 } else { (r as f64 - 1.5) * 0.25 + c as f64 / 3.0 })
            .unwrap()
    }

    #[test]
    fn single_value_layout() {
        let map = BasisMap::new(1, 1, 1, false, vec![0.0]).unwrap();
        let bytes = encode_basis(&map, Dtype::F64);
        assert_eq!(bytes.len(), HEADER_LEN + 8);
        assert_eq!(&bytes[..4], b"BDBF");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[21], 1);
        assert_eq!(decode_basis(&bytes, p()).unwrap(), map);
    }

    #[test]
    fn f32_round_trip_is_approximate() {
        let map = sample_map();
        let back = decode_basis(&encode_basis(&map, Dtype::F32), p()).unwrap();
        for (a, b) in map.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= f32::EPSILON as f64 * a.abs().max(1.0));
        }
        assert!(back.pixels().all(|px| px[0] == 1.0));
    }

    #[test]
    fn distinct_errors_for_each_corruption() {
        let good = encode_basis(&sample_map(), Dtype::F64);
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(decode_basis(&magic, p()), Err(Error::BadMagic { .. })));
        let mut crc = good.clone();
        crc[23] ^= 0xff;
        assert!(matches!(decode_basis(&crc, p()), Err(Error::Checksum { .. })));
        assert!(matches!(decode_basis(&good[..good.len() - 1], p()), Err(Error::Truncated { .. })));
        assert!(matches!(decode_basis(&good[..10], p()), Err(Error::Truncated { .. })));
        let mut version = good.clone();
        version[4] = 2;
        let fixed = crc32fast::hash(&version[..CHECKED_LEN]).to_le_bytes();
        version[22..26].copy_from_slice(&fixed);
        assert!(matches!(decode_basis(&version, p()), Err(Error::Version { version: 2, .. })));
        let mut dtype = good.clone();
        dtype[21] = 7;
        let fixed = crc32fast::hash(&dtype[..CHECKED_LEN]).to_le_bytes();
        dtype[22..26].copy_from_slice(&fixed);
        assert!(matches!(decode_basis(&dtype, p()), Err(Error::Dtype { tag: 7, .. })));
    }

    #[test]
    fn any_flipped_header_byte_is_rejected() {
        let good = encode_basis(&sample_map(), Dtype::F64);
        for i in 0..HEADER_LEN {
            for bit in 0..8 {
                let mut bad = good.clone();
                bad[i] ^= 1 << bit;
                assert!(decode_basis(&bad, p()).is_err(), "byte {i} bit {bit}");
            }
        }
    }

    #[test]
    fn sparse_text_parsing() {
        let one = parse_sparse("0,0,1.0\n", p()).unwrap();
        assert_eq!(one.entries(), &[SparseDepth { row: 0, col: 0, depth: 1.0 }]);
        assert!(parse_sparse("# nothing here\n\n   # still nothing\n", p()).unwrap().is_empty());
        let err = parse_sparse("# header\n1,2,3.0\n1,x,2.0\n", p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(matches!(parse_sparse("0,0,-1\n", p()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_sparse("0,0,1\n0,0,2\n", p()), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_sparse("0,0\n", p()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn sparse_text_round_trip_is_exact() {
        let entries =
            (0..20).map(|i| SparseDepth { row: i, col: 19 - i, depth: 0.1 + (i as f64).sqrt() * 3.7 }).collect();
        let set = SparseDepthSet::new(entries).unwrap();
        assert_eq!(parse_sparse(&format_sparse(&set), p()).unwrap(), set);
    }

    #[test]
    fn prior_file_validation() {
        let identity = PriorFile { num_bases: 2, m0: vec![0.0, 0.0], sigma0: vec![1.0, 0.0, 0.0, 1.0] };
        let prior = identity.to_prior().unwrap();
        assert_eq!(PriorFile::from(&prior), identity);
        let asym = PriorFile { num_bases: 2, m0: vec![0.0, 0.0], sigma0: vec![1.0, 0.2, 0.0, 1.0] };
        assert!(matches!(asym.to_prior(), Err(Error::InvalidPrior(_))));
        let short = PriorFile { num_bases: 2, m0: vec![0.0], sigma0: vec![1.0, 0.0, 0.0, 1.0] };
        assert!(short.to_prior().is_err());
    }
}
