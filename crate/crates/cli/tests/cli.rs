use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bundled(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// The shipped gridworld experiment, cut down to keep the tests quick.
fn small_gridworld() -> Value {
    let mut c = bundled("gridworld.json");
    c["eval"]["episodes"] = json!(10);
    c["eval"]["seeds"] = json!([0, 1]);
    c["sweep"]["alphas"] = json!([0.1, 1.0]);
    c
}

fn write_config(dir: &Path, config: &Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn ccvl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccvl")).args(args).output().unwrap()
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    ccvl(&args)
}

fn ok(output: Output) -> Output {
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn manifest(dir: &Path, cmd: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join(format!("manifest_{cmd}.json"))).unwrap()).unwrap()
}

struct Pipeline {
    _tmp: TempDir,
    config: PathBuf,
    out: PathBuf,
    exp: PathBuf,
}

fn pipeline(config: Value) -> Pipeline {
    let tmp = TempDir::new().unwrap();
    let path = write_config(tmp.path(), &config);
    let out = tmp.path().join("out");
    let exp = out.join(config["name"].as_str().unwrap());
    Pipeline { _tmp: tmp, config: path, out, exp }
}

impl Pipeline {
    fn run(&self, cmd: &str, extra: &[&str]) -> Output {
        run(cmd, &self.config, &self.out, extra)
    }

    fn dataset(&self) -> String {
        ok(self.run("collect", &[]));
        self.exp.join("dataset.jsonl").to_str().unwrap().to_string()
    }

    fn model(&self) -> String {
        let data = self.dataset();
        ok(self.run("train", &["--dataset", &data]));
        self.exp.join("model.json").to_str().unwrap().to_string()
    }
}

#[test]
fn collect_writes_one_line_per_sample() {
    let p = pipeline(small_gridworld());
    let data = p.dataset();
    assert_eq!(fs::read_to_string(data).unwrap().lines().count(), 2500);
    let m = manifest(&p.exp, "collect");
    assert_eq!(m["output_paths"][0]["path"], "dataset.jsonl");
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn zero_samples_is_a_config_error_naming_the_field() {
    let mut c = small_gridworld();
    c["dataset"]["num_samples"] = json!(0);
    let p = pipeline(c);
    let out = p.run("collect", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_samples"));
}

#[test]
fn collect_is_idempotent() {
    let p = pipeline(small_gridworld());
    p.dataset();
    let first = manifest(&p.exp, "collect")["output_paths"].clone();
    let bytes = fs::read(p.exp.join("dataset.jsonl")).unwrap();
    p.dataset();
    assert_eq!(manifest(&p.exp, "collect")["output_paths"], first);
    assert_eq!(fs::read(p.exp.join("dataset.jsonl")).unwrap(), bytes);
}

#[test]
fn train_writes_a_full_confidence_table() {
    let p = pipeline(small_gridworld());
    let model: Value = serde_json::from_str(&fs::read_to_string(p.model()).unwrap()).unwrap();
    assert_eq!(model["kind"], "confidence");
    let lower = &model["lower"];
    assert_eq!(lower["values"].as_array().unwrap().len(), 64 * 4 * 8);
    let csv = fs::read_to_string(p.exp.join("lower.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 64 * 4 * 8);
    let report: Value = serde_json::from_str(&fs::read_to_string(p.exp.join("solve_report.json")).unwrap()).unwrap();
    assert!(report.to_string().contains("argmax_degeneracy_rate"));
}

#[test]
fn train_plain_and_ensemble_methods() {
    let mut c = small_gridworld();
    c["solver"]["method"] = json!("plain");
    let p = pipeline(c.clone());
    p.model();
    assert!(p.exp.join("table.csv").exists());

    c["solver"]["method"] = json!("aevl");
    let p = pipeline(c);
    p.model();
    let members: Vec<_> = (0..5).map(|i| p.exp.join(format!("member_{i}.csv"))).collect();
    assert!(members.iter().all(|m| m.exists()));
    assert!(!p.exp.join("member_5.csv").exists());
}

#[test]
fn non_convergence_exits_with_code_three() {
    let mut c = small_gridworld();
    c["solver"]["max_iters"] = json!(1);
    let p = pipeline(c);
    let data = p.dataset();
    let out = p.run("train", &["--dataset", &data]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("residual"));
}

#[test]
fn shape_mismatch_exits_with_code_four() {
    let p = pipeline(small_gridworld());
    let model = p.model();
    let mut other = bundled("coverage.json");
    other["name"] = json!("gridworld");
    let tmp = TempDir::new().unwrap();
    let config = write_config(tmp.path(), &other);
    let out = run("eval", &config, &p.out, &["--model", &model]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn eval_writes_reports_named_by_method_alpha_and_seed() {
    let p = pipeline(small_gridworld());
    let model = p.model();
    ok(p.run("eval", &["--model", &model]));
    for seed in [0, 1] {
        let csv = fs::read_to_string(p.exp.join(format!("ccvl-reg_0.2_{seed}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 11);
        assert!(p.exp.join(format!("ccvl-reg_0.2_{seed}_trace.csv")).exists());
        let summary: Value =
            serde_json::from_str(&fs::read_to_string(p.exp.join(format!("ccvl-reg_0.2_{seed}.json"))).unwrap()).unwrap();
        assert!(summary["normalized_return"].is_f64());
    }
    ok(p.run("eval", &["--model", &model, "--seed", "7", "--format", "json"]));
    assert!(p.exp.join("ccvl-reg_0.2_7_report.json").exists());
}

#[test]
fn single_slice_sampling_matches_the_fixed_slice() {
    let mut c = small_gridworld();
    c["solver"]["grid"] = json!([0.3]);
    let sample = pipeline(c.clone());
    let model = sample.model();
    ok(sample.run("eval", &["--model", &model]));
    c["policy"]["mode"] = json!({"fixed_delta": {"index": 0}});
    let fixed = pipeline(c);
    ok(fixed.run("eval", &["--model", &model]));
    for name in ["ccvl-reg_0.2_0.csv", "ccvl-reg_0.2_1_trace.csv"] {
        assert_eq!(fs::read(sample.exp.join(name)).unwrap(), fs::read(fixed.exp.join(name)).unwrap());
    }
}

#[test]
fn coverage_writes_one_row_per_delta() {
    let mut c = bundled("coverage.json");
    c["coverage"]["num_resamples"] = json!(100);
    let p = pipeline(c);
    ok(p.run("coverage", &["--jobs", "2"]));
    let csv = fs::read_to_string(p.exp.join("coverage.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "delta,coverage,resamples,failures");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r[1])));
}

#[test]
fn sweep_writes_a_row_per_method_alpha_and_seed() {
    let p = pipeline(small_gridworld());
    ok(p.run("sweep", &["--jobs", "4"]));
    let csv = fs::read_to_string(p.exp.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "method,alpha,seed,mean_return,normalized_return");
    assert_eq!(lines.count(), 2 * 2 * 2);
    assert!(p.exp.join("cql_1_1.csv").exists());
    assert!(p.exp.join("ccvl-reg_0.1_0.csv").exists());
}

#[test]
fn bad_jobs_flag_is_a_config_error() {
    let p = pipeline(bundled("coverage.json"));
    assert_eq!(p.run("coverage", &["--jobs", "0"]).status.code(), Some(2));
}
