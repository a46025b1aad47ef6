use std::path::{Path, PathBuf};

use bdbf::basis::BasisMap;
use bdbf::io::{self, Dtype};
use bdbf::synth::{self, NoiseFamily, Sparsity, SynthConfig, SynthScene, DEFAULT_DEPTH_CAP};
use bdbf::GaussianPrior;
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::{self, parse_level};
use crate::error::{usage, CliResult};

/// Scene generator settings shared by `synth` and `sweep`.
#[derive(Debug, Args, Serialize)]
pub struct SceneFlags {
    #[arg(long)]
    h: Option<usize>,
    #[arg(long)]
    w: Option<usize>,
    /// Basis channels, including the bias channel.
    #[arg(long)]
    m: Option<usize>,
    /// Latent noise precision.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, value_parser = ["gaussian", "laplace"])]
    noise: Option<String>,
    /// Maximum sampled depth in meters.
    #[arg(long)]
    depth_cap: Option<f64>,
    /// Sample measurements anywhere, ignoring the depth cap.
    #[arg(long)]
    no_depth_cap: bool,
    /// Blur width of the basis channels in pixels.
    #[arg(long)]
    smoothness: Option<f64>,
    /// Generate without the constant bias channel.
    #[arg(long)]
    no_bias: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneOptions {
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub beta: f64,
    pub noise: NoiseFamily,
    pub depth_cap: f64,
    pub no_depth_cap: bool,
    pub smoothness: f64,
    pub no_bias: bool,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            h: 32,
            w: 32,
            m: 8,
            beta: 4.0,
            noise: NoiseFamily::Gaussian,
            depth_cap: DEFAULT_DEPTH_CAP,
            no_depth_cap: false,
            smoothness: 4.0,
            no_bias: false,
        }
    }
}

impl SceneOptions {
    /// Generator settings for one seed.
    pub fn scene_config(&self, seed: u64, sparsity: Sparsity) -> SynthConfig {
        let mut cfg = SynthConfig::new(self.h, self.w, self.m).with_seed(seed);
        cfg.bias = !self.no_bias;
        cfg.prior = self.generating_prior();
        cfg.noise_precision = self.beta;
        cfg.noise_family = self.noise;
        cfg.sparsity = sparsity;
        cfg.smoothness = self.smoothness;
        cfg.depth_cap = if self.no_depth_cap { None } else { Some(self.depth_cap) };
        cfg
    }

    pub fn generating_prior(&self) -> GaussianPrior {
        synth::default_prior(self.m, !self.no_bias)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// First scene seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds to generate.
    #[arg(long)]
    count: Option<u64>,
    /// Measurement count ("500") or fraction ("0.05", "5%").
    #[arg(long)]
    sparsity: Option<String>,
    #[arg(long, value_parser = ["f32", "f64"])]
    dtype: Option<String>,
    /// Also write the generating prior as prior.json.
    #[arg(long)]
    write_prior: bool,
    #[command(flatten)]
    #[serde(flatten)]
    scene: SceneFlags,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SynthRun {
    out: Option<PathBuf>,
    seed: u64,
    count: u64,
    sparsity: Value,
    dtype: String,
    write_prior: bool,
    #[serde(flatten)]
    scene: SceneOptions,
}

impl Default for SynthRun {
    fn default() -> Self {
        Self {
            out: None,
            seed: 0,
            count: 1,
            sparsity: Value::String("500".into()),
            dtype: "f64".into(),
            write_prior: false,
            scene: SceneOptions::default(),
        }
    }
}

pub fn parse_dtype(s: &str) -> CliResult<Dtype> {
    match s {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(usage(format!("unknown dtype {other:?} (expected f32 or f64)"))),
    }
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    path: PathBuf,
    bytes: u64,
    sha256: String,
}

pub fn sha256_file(path: &Path) -> CliResult<(u64, String)> {
    let bytes = std::fs::read(path).map_err(|source| bdbf::Error::Io { path: path.to_path_buf(), source })?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

fn truth_map(scene: &SynthScene) -> CliResult<BasisMap> {
    let b = &scene.basis;
    Ok(BasisMap::new(b.height(), b.width(), 1, false, scene.depth_true.clone())?)
}

pub fn run(args: &SynthArgs) -> CliResult<()> {
    let (run, echo): (SynthRun, _) = config::resolve(args.config.as_deref(), args)?;
    let out = run.out.clone().ok_or_else(|| usage("synth needs --out"))?;
    let dtype = parse_dtype(&run.dtype)?;
    if run.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let sparsity = parse_level(&run.sparsity)?;

    let mut files = Vec::new();
    for seed in run.seed..run.seed + run.count {
        let cfg = run.scene.scene_config(seed, sparsity);
        let scene = synth::generate(&cfg)?;
        // bad settings surface on the first scene, before the disk is touched
        if seed == run.seed {
            std::fs::create_dir_all(&out).map_err(|source| bdbf::Error::Io { path: out.clone(), source })?;
        }
        let basis = out.join(format!("scene_{seed}_basis.bdbf"));
        let sparse = out.join(format!("scene_{seed}_sparse.csv"));
        let truth = out.join(format!("scene_{seed}_truth.bdbf"));
        io::write_basis(&scene.basis, &basis, dtype)?;
        io::write_sparse(&scene.sparse, &sparse)?;
        io::write_basis(&truth_map(&scene)?, &truth, Dtype::F64)?;
        files.extend([basis, sparse, truth]);
    }
    if run.write_prior {
        let path = out.join("prior.json");
        io::write_prior(&run.scene.generating_prior(), &path)?;
        files.push(path);
    }

    let manifest = files
        .into_iter()
        .map(|path| {
            let (bytes, sha256) = sha256_file(&path)?;
            Ok(ManifestEntry { path, bytes, sha256 })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let doc = serde_json::json!({ "config": echo, "files": manifest });
    crate::emit(&serde_json::to_string_pretty(&doc).expect("manifest serializes"));
    Ok(())
}
