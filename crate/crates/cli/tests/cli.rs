use std::path::Path;
use std::process::{Command, Output};

use bdbf::basis::{BasisMap, SparseDepth, SparseDepthSet};
use bdbf::io::{self, Dtype};
use bdbf::metrics::laplace_quantile;
use bdbf::{CalibrationState, PredictiveField};
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn bdbf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdbf")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = bdbf(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args =
        vec!["synth", "--out", "scenes", "--seed", "1", "--h", "32", "--w", "32", "--m", "8", "--write-prior"];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

fn read_pred(path: &Path) -> PredictiveField {
    let map = io::read_basis(path).unwrap();
    let (mean, var) = map.pixels().map(|p| (p[0], p[1])).unzip();
    PredictiveField { height: map.height(), width: map.width(), mean, var }
}

fn write_pred(path: &Path, h: usize, w: usize, mean: &[f64], var: &[f64]) {
    let values = mean.iter().zip(var).flat_map(|(&m, &v)| [m, v]).collect();
    io::write_basis(&BasisMap::new(h, w, 2, false, values).unwrap(), path, Dtype::F64).unwrap();
}

fn write_truth(path: &Path, h: usize, w: usize, depth: Vec<f64>) {
    io::write_basis(&BasisMap::new(h, w, 1, false, depth).unwrap(), path, Dtype::F64).unwrap();
}

// Frozen outputs of `synth --seed 1 --h 32 --w 32 --m 8 --sparsity 0.05`.
const GOLDEN_SYNTH: [(&str, &str); 3] = [
    ("scene_1_basis.bdbf", "82babd6933274ec87caa6737d69c3f141f1ac1268e6e9de4e0a84f461724fd75"),
    ("scene_1_sparse.csv", "ec10fc715c965ffa59dbb5f7329fde8f4c6ac356b2a071d6f8e3f027687e0975"),
    ("scene_1_truth.bdbf", "83a3890689a2f97eedeb5566fe404c5e3ed83bea7edc1528d55b222389a97054"),
];

#[test]
fn synth_matches_golden_hashes_and_is_repeatable() {
    let dir = TempDir::new().unwrap();
    let first = ok(
        dir.path(),
        &["synth", "--seed", "1", "--h", "32", "--w", "32", "--m", "8", "--sparsity", "0.05", "--out", "a"],
    );
    let second = ok(
        dir.path(),
        &["synth", "--seed", "1", "--h", "32", "--w", "32", "--m", "8", "--sparsity", "0.05", "--out", "b"],
    );
    assert_eq!(first.replace("\"a/", "\"b/").replace("\"a\"", "\"b\""), second);
    for (name, want) in GOLDEN_SYNTH {
        let got = sha(&dir.path().join("a").join(name));
        assert_eq!(got, sha(&dir.path().join("b").join(name)));
        assert_eq!(got, want, "{name}");
        assert!(first.contains(&got));
    }
    let sparse = io::read_sparse(&dir.path().join("a/scene_1_sparse.csv")).unwrap();
    assert_eq!(sparse.len(), 51);
}

#[test]
fn synth_with_zero_sparsity_writes_empty_set() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &["--sparsity", "0", "--count", "2"]);
    for seed in [1, 2] {
        let set = io::read_sparse(&dir.path().join(format!("scenes/scene_{seed}_sparse.csv"))).unwrap();
        assert!(set.is_empty());
    }
}

#[test]
fn fit_converges_and_reports() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &["--sparsity", "500"]);
    ok(
        dir.path(),
        &[
            "fit",
            "--basis",
            "scenes/scene_1_basis.bdbf",
            "--sparse",
            "scenes/scene_1_sparse.csv",
            "--prior",
            "scenes/prior.json",
            "--out",
            "fit",
        ],
    );
    let report = io::read_report(&dir.path().join("fit/scene_1_fit.json")).unwrap();
    let fit = report.fit.unwrap();
    assert_eq!(fit.mode, "em");
    assert_eq!(fit.n_obs, 500);
    assert!(fit.converged && fit.em_iters <= 8);
    assert_eq!(report.config["em_max_iters"], 8);
    let pred = io::read_basis(&dir.path().join("fit/scene_1_pred.bdbf")).unwrap();
    assert_eq!((pred.height(), pred.width(), pred.num_bases()), (32, 32, 2));

    // repeated runs are byte-identical
    ok(
        dir.path(),
        &[
            "fit",
            "--basis",
            "scenes/scene_1_basis.bdbf",
            "--sparse",
            "scenes/scene_1_sparse.csv",
            "--prior",
            "scenes/prior.json",
            "--out",
            "fit2",
        ],
    );
    assert_eq!(sha(&dir.path().join("fit/scene_1_pred.bdbf")), sha(&dir.path().join("fit2/scene_1_pred.bdbf")));
    let a = std::fs::read_to_string(dir.path().join("fit/scene_1_fit.json")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("fit2/scene_1_fit.json")).unwrap();
    assert_eq!(a.replace("\"out\": \"fit\"", "\"out\": \"fit2\""), b);
}

#[test]
fn prior_only_fit_equals_prior_prediction() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &["--sparsity", "0"]);
    ok(
        dir.path(),
        &[
            "fit",
            "--basis",
            "scenes/scene_1_basis.bdbf",
            "--sparse",
            "scenes/scene_1_sparse.csv",
            "--prior",
            "scenes/prior.json",
            "--out",
            "fit",
        ],
    );
    let basis = io::read_basis(&dir.path().join("scenes/scene_1_basis.bdbf")).unwrap();
    let prior = io::read_prior(&dir.path().join("scenes/prior.json")).unwrap();
    let want = PredictiveField::from_prior(&prior, &basis).unwrap();
    assert_eq!(read_pred(&dir.path().join("fit/scene_1_pred.bdbf")), want);
    let fit = io::read_report(&dir.path().join("fit/scene_1_fit.json")).unwrap().fit.unwrap();
    assert_eq!(fit.mode, "prior_only");

    let out = bdbf(
        dir.path(),
        &["fit", "--basis", "scenes/scene_1_basis.bdbf", "--sparse", "scenes/scene_1_sparse.csv", "--out", "fit"],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("prior required"));
}

#[test]
fn broad_prior_matches_ml_only() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &["--sparsity", "800"]);
    let common = ["--basis", "scenes/scene_1_basis.bdbf", "--sparse", "scenes/scene_1_sparse.csv"];
    ok(dir.path(), &[&["fit"][..], &common, &["--ml-only", "--out", "ml"]].concat());
    ok(dir.path(), &[&["fit"][..], &common, &["--broad-prior", "--out", "broad"]].concat());
    let ml = read_pred(&dir.path().join("ml/scene_1_pred.bdbf"));
    let broad = read_pred(&dir.path().join("broad/scene_1_pred.bdbf"));
    let worst = ml.mean.iter().zip(&broad.mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-6, "{worst}");

    let out = bdbf(dir.path(), &[&["fit"][..], &common, &["--broad-prior", "--ml-only", "--out", "x"]].concat());
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_of_perfect_prediction() {
    let dir = TempDir::new().unwrap();
    let mean: Vec<f64> = (0..12).map(|i| 0.1 + i as f64 * 0.3).collect();
    // predicted depth is exp(μ), so build the truth the same way
    let depth: Vec<f64> = mean.iter().map(|m| m.exp()).collect();
    let var: Vec<f64> = (0..12).map(|i| 0.01 * (i + 1) as f64).collect();
    write_truth(&dir.path().join("t.bdbf"), 3, 4, depth);
    write_pred(&dir.path().join("p_pred.bdbf"), 3, 4, &mean, &var);
    let stdout = ok(dir.path(), &["eval", "--pred", "p_pred.bdbf", "--truth", "t.bdbf", "--out", "ev"]);
    let m = io::read_report(&dir.path().join("ev/p_eval.json")).unwrap().metrics.unwrap();
    assert_eq!((m.mae, m.rmse, m.delta1), (0.0, 0.0, 100.0));
    // ln(exp(μ)) leaves rounding-level latent errors
    assert!(m.ause.abs() < 1e-12, "{}", m.ause);
    assert!(stdout.contains("\"mae\": 0.0"));
    ok(
        dir.path(),
        &["eval", "--pred", "p_pred.bdbf", "--truth", "t.bdbf", "--out", "ev", "--name", "d", "--ause-space", "depth"],
    );
    let m = io::read_report(&dir.path().join("ev/d_eval.json")).unwrap().metrics.unwrap();
    assert_eq!(m.ause, 0.0);
    for curve in ["sparsification", "oracle", "calibration"] {
        let text = std::fs::read_to_string(dir.path().join(format!("ev/p_{curve}.csv"))).unwrap();
        assert_eq!(text.lines().count(), 101, "{curve}");
    }
}

#[test]
fn eval_hand_built_three_pixels() {
    let dir = TempDir::new().unwrap();
    // depth errors {1, 2, 3} m
    let truth = vec![2.0, 4.0, 6.0];
    let pred = [3.0_f64, 6.0, 9.0];
    let mean: Vec<f64> = pred.iter().map(|d| d.ln()).collect();
    write_truth(&dir.path().join("t.bdbf"), 1, 3, truth);
    write_pred(&dir.path().join("p.bdbf"), 1, 3, &mean, &[0.1, 0.2, 0.3]);
    ok(
        dir.path(),
        &["eval", "--pred", "p.bdbf", "--truth", "t.bdbf", "--out", "ev", "--name", "hand", "--ause-space", "depth"],
    );
    let report = io::read_report(&dir.path().join("ev/hand_eval.json")).unwrap();
    let m = report.metrics.unwrap();
    // exp(ln d) is within an ulp of d
    assert!((m.mae - 2.0).abs() < 1e-14, "{}", m.mae);
    assert!((m.rmse - (14.0_f64 / 3.0).sqrt()).abs() < 1e-14);
    // ratios are 1.5 everywhere
    assert_eq!(m.delta1, 0.0);
    // uncertainty order equals error order in depth space
    assert_eq!(m.ause, 0.0);
    assert_eq!(report.config["ause_space"], "depth");

    // shape mismatch
    write_truth(&dir.path().join("t2.bdbf"), 1, 2, vec![1.0, 1.0]);
    let out = bdbf(dir.path(), &["eval", "--pred", "p.bdbf", "--truth", "t2.bdbf", "--out", "ev"]);
    assert_eq!(code(&out), 2);
}

/// Laplace residuals at stratified quantiles: an exact discretization of the
/// distribution, so the mean NEES is 1 up to discretization error.
fn stratified_laplace(n: usize, b: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            b * laplace_quantile((i as f64 + 0.5) / n as f64).signum()
                * -(1.0 - 2.0 * ((i as f64 + 0.5) / n as f64 - 0.5).abs()).ln()
        })
        .collect()
}

#[test]
fn calibrate_measures_and_applies() {
    let dir = TempDir::new().unwrap();
    let (h, w) = (40, 50);
    let n = h * w;
    let b = 0.2;
    let var = vec![2.0 * b * b; n];
    let mean = vec![1.5; n];
    let depth: Vec<f64> = stratified_laplace(n, b).iter().map(|r| (1.5 + r).exp()).collect();
    write_truth(&dir.path().join("t.bdbf"), h, w, depth.clone());
    write_pred(&dir.path().join("good.bdbf"), h, w, &mean, &var);
    let quarter: Vec<f64> = var.iter().map(|v| v / 4.0).collect();
    write_pred(&dir.path().join("tight.bdbf"), h, w, &mean, &quarter);

    ok(dir.path(), &["calibrate", "--pred", "good.bdbf", "--truth", "t.bdbf", "--out", "good.json"]);
    let good = io::read_calibration(&dir.path().join("good.json")).unwrap();
    assert!((0.9..=1.1).contains(&good.mean_nees), "{}", good.mean_nees);

    ok(dir.path(), &["calibrate", "--pred", "tight.bdbf", "--truth", "t.bdbf", "--out", "tight.json"]);
    let tight = io::read_calibration(&dir.path().join("tight.json")).unwrap();
    assert!((tight.mean_nees / good.mean_nees - 4.0).abs() < 1e-9);

    let out = bdbf(dir.path(), &["calibrate", "--out", "x.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn calibration_round_trip_through_fit() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &["--sparsity", "300", "--noise", "laplace", "--count", "3"]);
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for seed in 1..=3 {
        let basis = format!("scenes/scene_{seed}_basis.bdbf");
        let sparse = format!("scenes/scene_{seed}_sparse.csv");
        ok(
            dir.path(),
            &["fit", "--basis", &basis, "--sparse", &sparse, "--prior", "scenes/prior.json", "--out", "raw"],
        );
        preds.push(format!("raw/scene_{seed}_pred.bdbf"));
        truths.push(format!("scenes/scene_{seed}_truth.bdbf"));
    }
    let batch = |preds: &[String], out: &str| {
        let mut args = vec!["calibrate", "--out", out, "--pred"];
        args.extend(preds.iter().map(String::as_str));
        args.push("--truth");
        args.extend(truths.iter().map(String::as_str));
        ok(dir.path(), &args);
        io::read_calibration(&dir.path().join(out)).unwrap()
    };
    let before = batch(&preds, "cal.json");
    assert!(before.mean_nees > 1.0);

    let mut calibrated = Vec::new();
    for seed in 1..=3 {
        let basis = format!("scenes/scene_{seed}_basis.bdbf");
        let sparse = format!("scenes/scene_{seed}_sparse.csv");
        ok(
            dir.path(),
            &[
                "fit",
                "--basis",
                &basis,
                "--sparse",
                &sparse,
                "--prior",
                "scenes/prior.json",
                "--out",
                "cal",
                "--calibration",
                "cal.json",
            ],
        );
        calibrated.push(format!("cal/scene_{seed}_pred.bdbf"));
    }
    let after: CalibrationState = batch(&calibrated, "after.json");
    assert!((after.mean_nees - 1.0).abs() < 1e-9, "{}", after.mean_nees);
    let fit = io::read_report(&dir.path().join("cal/scene_1_fit.json")).unwrap().fit.unwrap();
    assert_eq!(fit.mean_nees, Some(before.mean_nees));
}

fn sweep_rows(dir: &Path, file: &str) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(dir.join(file)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("seed,level,n_obs,mode,alpha,beta,em_iters,converged,mae,rmse,delta1,ause,auce,nll"));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn sweep_rows_tags_and_trend() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["sweep", "--out", "sweep.csv", "--levels", "500,250,50,0", "--count", "5"]);
    let rows = sweep_rows(dir.path(), "sweep.csv");
    assert_eq!(rows.len(), 20);
    let levels = ["500", "250", "50", "0"];
    let mut mae = [0.0; 4];
    for row in &rows {
        let li = levels.iter().position(|l| *l == row[1]).unwrap();
        assert_eq!(row[2], row[1]);
        assert_eq!(row[3] == "prior_only", row[1] == "0");
        mae[li] += row[8].parse::<f64>().unwrap() / 5.0;
    }
    assert!(mae.windows(2).all(|w| w[0] <= w[1]), "{mae:?}");

    // thread count does not change the output
    let single = Command::new(env!("CARGO_BIN_EXE_bdbf"))
        .current_dir(dir.path())
        .env("BDBF_THREADS", "1")
        .args(["sweep", "--out", "single.csv", "--levels", "500,250,50,0", "--count", "5"])
        .status()
        .unwrap();
    assert!(single.success());
    assert_eq!(sha(&dir.path().join("sweep.csv")), sha(&dir.path().join("single.csv")));

    let bad = Command::new(env!("CARGO_BIN_EXE_bdbf"))
        .current_dir(dir.path())
        .env("BDBF_THREADS", "zero")
        .args(["sweep", "--out", "x.csv"])
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);
}

#[test]
fn config_file_layers_under_flags() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &["--sparsity", "200"]);
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"basis": "scenes/scene_1_basis.bdbf", "sparse": "scenes/scene_1_sparse.csv",
            "prior": "scenes/prior.json", "out": "fit", "em_max_iters": 1, "em_tol": 0.5}"#,
    )
    .unwrap();
    ok(dir.path(), &["fit", "--config", "cfg.json", "--em-max-iters", "5"]);
    let config = io::read_report(&dir.path().join("fit/scene_1_fit.json")).unwrap().config;
    assert_eq!(config["em_max_iters"], 5);
    assert_eq!(config["em_tol"], 0.5);
    assert_eq!(config["include_noise"], false);

    std::fs::write(dir.path().join("bad.json"), r#"{"em_max_iter": 3}"#).unwrap();
    assert_eq!(code(&bdbf(dir.path(), &["fit", "--config", "bad.json"])), 2);
    assert_eq!(code(&bdbf(dir.path(), &["fit", "--config", "missing.json"])), 3);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &["--sparsity", "100"]);
    assert_eq!(code(&bdbf(dir.path(), &[])), 2);
    assert_eq!(code(&bdbf(dir.path(), &["fit", "--nonsense"])), 2);
    assert_eq!(code(&bdbf(dir.path(), &["synth", "--out", "x", "--sparsity", "lots"])), 2);
    assert_eq!(code(&bdbf(dir.path(), &["--help"])), 0);

    // corrupted basis
    let path = dir.path().join("scenes/scene_1_basis.bdbf");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[9] ^= 0xff;
    std::fs::write(dir.path().join("corrupt.bdbf"), &bytes).unwrap();
    let out = bdbf(
        dir.path(),
        &[
            "fit",
            "--basis",
            "corrupt.bdbf",
            "--sparse",
            "scenes/scene_1_sparse.csv",
            "--prior",
            "scenes/prior.json",
            "--out",
            "f",
        ],
    );
    assert_eq!(code(&out), 3);
    assert!(!dir.path().join("f").exists());

    // two identical channels: the ML normal equations are singular
    let sparse =
        SparseDepthSet::new((0..10).map(|i| SparseDepth { row: i, col: 0, depth: 2.0 + i as f64 }).collect()).unwrap();
    io::write_sparse(&sparse, &dir.path().join("s.csv")).unwrap();
    let degenerate = BasisMap::from_fn(10, 1, 3, true, |r, _, k| if k == 0 { 1.0 } else { r as f64 }).unwrap();
    io::write_basis(&degenerate, &dir.path().join("deg.bdbf"), Dtype::F64).unwrap();
    let out = bdbf(dir.path(), &["fit", "--basis", "deg.bdbf", "--sparse", "s.csv", "--ml-only", "--out", "g"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("g").exists());
}

#[test]
fn prior_command_estimates_from_training_scenes() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), &["--sparsity", "400", "--count", "6"]);
    let mut args: Vec<String> = vec!["prior".into(), "--out".into(), "est.json".into(), "--basis".into()];
    args.extend((1..=6).map(|s| format!("scenes/scene_{s}_basis.bdbf")));
    args.push("--sparse".into());
    args.extend((1..=6).map(|s| format!("scenes/scene_{s}_sparse.csv")));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(dir.path(), &refs);
    let prior = io::read_prior(&dir.path().join("est.json")).unwrap();
    assert_eq!(prior.dim(), 8);
    // generating bias mean is 2.5
    assert!((prior.mean()[0] - 2.5).abs() < 1.0, "{}", prior.mean()[0]);

    let out = bdbf(
        dir.path(),
        &["prior", "--out", "x.json", "--basis", "scenes/scene_1_basis.bdbf", "--sparse", "scenes/scene_1_sparse.csv"],
    );
    assert_eq!(code(&out), 2);
}
