use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::Parser;
use covadj::simlab::{simulate_trial, CovariateSampler, Delta, DgpSpec, Outcome};
use covadj_cli::{Cli, Command as Sub, Format};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;

fn covadj(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covadj")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Continuous trial with arms labelled "trt"/"ctrl" and covariates x0..x{p-1}.
fn write_trial(dir: &Path, name: &str, n: usize, p: usize, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::from("A,Y");
    for j in 0..p {
        s.push_str(&format!(",x{j}"));
    }
    s.push('\n');
    for i in 0..n {
        let arm = i % 2;
        let x: Vec<f64> = (0..p).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let y = 1.0 + arm as f64 + 2.0 * x[0] + rng.random::<f64>();
        s.push_str(if arm == 1 { "trt" } else { "ctrl" });
        s.push_str(&format!(",{y}"));
        for v in x {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    let path = dir.join(name);
    std::fs::write(&path, s).unwrap();
    path
}

/// One draw of the continuous linear simulation design: 55 covariates.
fn write_sim_trial(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let spec = DgpSpec::new(Outcome::Continuous, Delta::Linear, n, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trial = simulate_trial(&spec, &CovariateSampler::new(), &mut rng).unwrap();
    let path = dir.join("sim.csv");
    trial.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
    path
}

fn analyze_json(data: &Path, trt: &str, ctrl: &str, method: &str) -> Value {
    let out = covadj(&[
        "analyze",
        "--data",
        path_str(data),
        "--trt-name",
        trt,
        "--ctrl-name",
        ctrl,
        "--var-sel-method",
        method,
        "--format",
        "json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_str(&stdout(&out)).unwrap()
}

fn select_json(data: &Path, extra: &[&str]) -> Value {
    let mut args = vec!["select", "--data", path_str(data), "--trt-name", "1", "--ctrl-name", "0"];
    args.extend_from_slice(extra);
    let out = covadj(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_str(&stdout(&out)).unwrap()
}

#[test]
fn defaults_match_reference_table() {
    let cli =
        Cli::try_parse_from(["covadj", "analyze", "--data", "d.csv", "--trt-name", "t", "--ctrl-name", "c"]).unwrap();
    let Sub::Analyze(a) = cli.command else { panic!("wrong subcommand") };
    assert_eq!(a.data.var_sel_method, "Lasso");
    assert_eq!(a.data.k, 1);
    assert_eq!(a.data.xi, 0.25);
    assert_eq!(a.data.pre_alpha, 0.05);
    assert_eq!(a.data.mi_method, "cc");
    assert_eq!(a.data.seed, 4399);
    assert_eq!(a.conf_level, 0.95);
    assert_eq!(a.data.outcome_col, "Y");
    assert_eq!(a.data.treatment_col, "A");
    assert!(a.out1_model_aipw.is_none() && a.out0_model_aipw.is_none());
    assert_eq!(a.format, Format::Text);

    let cli = Cli::try_parse_from(["covadj", "simulate"]).unwrap();
    let Sub::Simulate(s) = cli.command else { panic!("wrong subcommand") };
    assert_eq!((s.n, s.m, s.seed, s.workers), (500, 500, 4399, 1));
    assert_eq!(s.linear_delta_reading, "as-written");
}

#[test]
fn analyze_small_dataset_gives_four_finite_rows() {
    let dir = TempDir::new().unwrap();
    let data = write_trial(dir.path(), "d.csv", 40, 3, 1);
    let v = analyze_json(&data, "trt", "ctrl", "No");
    let est = v["estimates"].as_array().unwrap();
    assert_eq!(est.len(), 4);
    assert!(est.iter().all(|e| e["tau_hat"].as_f64().unwrap().is_finite()));

    let out = covadj(&[
        "analyze",
        "--data",
        path_str(&data),
        "--trt-name",
        "trt",
        "--ctrl-name",
        "ctrl",
        "--var-sel-method",
        "No",
    ]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.lines().next().unwrap().contains("ci.lwr"), "{text}");
    assert_eq!(text.lines().count(), 5, "{text}");
}

#[test]
fn analyze_writes_sidecar() {
    let dir = TempDir::new().unwrap();
    let data = write_trial(dir.path(), "d.csv", 60, 4, 2);
    let side = dir.path().join("side.json");
    let out = covadj(&[
        "analyze",
        "--data",
        path_str(&data),
        "--trt-name",
        "trt",
        "--ctrl-name",
        "ctrl",
        "--sidecar",
        path_str(&side),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&side).unwrap()).unwrap();
    assert!(v["selection"]["pooled"].is_array());
    assert!(v["potential_means"].is_object());
    assert_eq!(v["config"]["seed"], 4399);
}

#[test]
fn more_covariates_than_rows_gives_na_and_exit_zero() {
    let dir = TempDir::new().unwrap();
    let data = write_trial(dir.path(), "wide.csv", 30, 40, 3);
    let v = analyze_json(&data, "trt", "ctrl", "No");
    for e in v["estimates"].as_array().unwrap() {
        let m = e["method"].as_str().unwrap().to_ascii_lowercase();
        if m == "ancova" || m == "anhecova" {
            assert!(e["se"].is_null(), "{e}");
            assert_eq!(e["diagnostics"]["rank_deficient"], true);
        }
    }
    let out = covadj(&[
        "analyze",
        "--data",
        path_str(&data),
        "--trt-name",
        "trt",
        "--ctrl-name",
        "ctrl",
        "--var-sel-method",
        "No",
    ]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("NA"));
}

#[test]
fn unsupported_imputation_is_config_error() {
    let dir = TempDir::new().unwrap();
    let data = write_trial(dir.path(), "d.csv", 20, 2, 4);
    let out = covadj(&[
        "analyze",
        "--data",
        path_str(&data),
        "--trt-name",
        "trt",
        "--ctrl-name",
        "ctrl",
        "--mi-method",
        "missForest",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--mi-method"));
}

#[test]
fn missing_column_is_data_error() {
    let dir = TempDir::new().unwrap();
    let data = write_trial(dir.path(), "d.csv", 20, 2, 5);
    let out = covadj(&[
        "analyze",
        "--data",
        path_str(&data),
        "--trt-name",
        "trt",
        "--ctrl-name",
        "ctrl",
        "--outcome-col",
        "Z",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains('Z'));
}

#[test]
fn bad_flag_value_is_config_error() {
    let out = covadj(&["simulate", "--n", "2", "--m", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let out = covadj(&["simulate", "--delta", "cubic"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let data = write_sim_trial(dir.path(), 120, 8);
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# selection\nvar_sel_method = Corr.k\nk = 3\n").unwrap();
    let v = select_json(&data, &["--config", path_str(&cfg)]);
    assert_eq!(v["selection"]["pooled"].as_array().unwrap().len(), 3);
    let v = select_json(&data, &["--config", path_str(&cfg), "--k", "6"]);
    assert_eq!(v["selection"]["pooled"].as_array().unwrap().len(), 6);
}

#[test]
fn simulate_reports_one_bias_sample_per_replication() {
    let dir = TempDir::new().unwrap();
    let json = dir.path().join("r.json");
    let args = [
        "simulate",
        "--outcome",
        "continuous",
        "--delta",
        "nonlinear",
        "--n",
        "100",
        "--m",
        "10",
        "--seed",
        "1",
        "--methods",
        "Simple,Lasso+ANHECOVA,Lasso+AIPW",
        "--oracle-n-big",
        "20000",
        "--oracle-reps",
        "2",
        "--output",
        path_str(&json),
    ];
    let out = covadj(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("oracle tau"));
    let first = std::fs::read(&json).unwrap();
    let v: Value = serde_json::from_slice(&first).unwrap();
    let methods = v["methods"].as_array().unwrap();
    assert_eq!(methods.len(), 3);
    for m in methods {
        assert_eq!(m["bias"].as_array().unwrap().len(), 10, "{}", m["label"]);
    }
    assert!(covadj(&args).status.success());
    assert_eq!(first, std::fs::read(&json).unwrap());
}

#[test]
fn simulate_writes_summary_and_replication_csv() {
    let dir = TempDir::new().unwrap();
    let summary = dir.path().join("s.csv");
    let reps = dir.path().join("r.csv");
    let out = covadj(&[
        "simulate",
        "--n",
        "60",
        "--m",
        "4",
        "--methods",
        "Simple,No+ANCOVA",
        "--oracle-tau",
        "0",
        "--summary-csv",
        path_str(&summary),
        "--replications-csv",
        path_str(&reps),
        "--format",
        "csv",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = std::fs::read_to_string(&summary).unwrap();
    assert_eq!(s.lines().count(), 3);
    assert_eq!(stdout(&out), s);
    assert_eq!(std::fs::read_to_string(&reps).unwrap().lines().count(), 1 + 2 * 4);
}

#[test]
fn workers_do_not_change_output() {
    let base = [
        "simulate",
        "--n",
        "80",
        "--m",
        "6",
        "--seed",
        "11",
        "--methods",
        "Simple,Lasso+AIPW,Corr.k+ANHECOVA",
        "--oracle-n-big",
        "5000",
        "--oracle-reps",
        "3",
        "--format",
        "json",
    ];
    let run = |w: &str| {
        let mut a = base.to_vec();
        a.extend_from_slice(&["--workers", w]);
        let out = covadj(&a);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    assert_eq!(run("1"), run("8"));
}

#[test]
fn binary_linear_oracle_near_published_value() {
    let out = covadj(&["simulate", "--outcome", "binary", "--delta", "linear", "--oracle-only", "--format", "json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    let tau = v["tau"].as_f64().unwrap();
    assert!((0.10..=0.12).contains(&tau), "oracle tau {tau} outside [0.10, 0.12]");
}

#[test]
fn select_corr_k_returns_k_names() {
    let dir = TempDir::new().unwrap();
    let data = write_sim_trial(dir.path(), 200, 21);
    let v = select_json(&data, &["--var-sel-method", "Corr.k", "--k", "5"]);
    assert_eq!(v["selection"]["pooled"].as_array().unwrap().len(), 5);
}

#[test]
fn select_no_returns_all_names() {
    let dir = TempDir::new().unwrap();
    let data = write_sim_trial(dir.path(), 100, 22);
    let v = select_json(&data, &["--var-sel-method", "No"]);
    let pooled: Vec<&str> = v["selection"]["pooled"].as_array().unwrap().iter().map(|s| s.as_str().unwrap()).collect();
    assert_eq!(pooled.len(), 55);
    assert_eq!(pooled[0], "X1");
    assert_eq!(pooled[54], "V50");
}

#[test]
fn select_lasso_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let data = write_sim_trial(dir.path(), 200, 23);
    let a = select_json(&data, &["--var-sel-method", "Lasso", "--seed", "7"]);
    let b = select_json(&data, &["--var-sel-method", "Lasso", "--seed", "7"]);
    assert_eq!(a, b);
}

#[test]
fn exported_selection_reproduces_direct_analysis() {
    let dir = TempDir::new().unwrap();
    let data = write_sim_trial(dir.path(), 200, 24);
    for method in ["Lasso", "Corr.k", "Pre.test"] {
        let export = dir.path().join(format!("{method}.csv"));
        select_json(&data, &["--var-sel-method", method, "--export-csv", path_str(&export)]);
        let direct = analyze_json(&data, "1", "0", method);
        let reuse = analyze_json(&export, "1", "0", "No");
        for i in 0..3 {
            let d = &direct["estimates"][i];
            let r = &reuse["estimates"][i];
            assert_eq!(d["method"], r["method"]);
            let (td, tr) = (d["tau_hat"].as_f64().unwrap(), r["tau_hat"].as_f64().unwrap());
            assert!((td - tr).abs() <= 1e-10, "{method} {}: {td} vs {tr}", d["method"]);
        }
    }
}
