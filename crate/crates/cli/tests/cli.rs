use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL_GRID: &str = "[grid]\nN = 256\nL = 25.132741228718345\n";

fn gevolab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gevolab")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run(command: &str, config: &Path, out: &Path) -> Output {
    gevolab(&[command, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

#[test]
fn classify_reports_l2_profile() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        "l2.toml",
        "[profile]\nell = 1.0\nk = 2.0\nkprime = 2.0\nsigma2 = 1.5\nsigma1 = 0.6\n",
    );
    let output = run("classify", &config, &dir.path().join("out"));
    assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
    let class: Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(class["kind"], "L2");
    assert!(stderr(&output).starts_with("L2"));
}

#[test]
fn classify_reports_gevrey_indices_and_branch() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "default.toml", "");
    let output = run("classify", &config, &dir.path().join("out"));
    assert_eq!(output.status.code(), Some(0));
    let class: Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(class["kind"], "GevreyHInfinity");
    assert!((class["q2"].as_f64().unwrap() - 6.0 / 7.0).abs() < 1e-12);
    assert_eq!(class["q1"].as_f64(), Some(0.0));
    assert!((class["theta_sup"].as_f64().unwrap() - 7.0 / 6.0).abs() < 1e-12);
    assert_eq!(class["theorem_branch"], "gap_gevrey");
    assert!(!class["trace"].as_array().unwrap().is_empty());
}

#[test]
fn out_of_scope_profile_still_exits_zero() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "oos.toml", "[profile]\nell = 1.0\nk = 2.0\nkprime = 2.0\nsigma2 = 0.5\nsigma1 = 0.9\n");
    let output = run("classify", &config, &dir.path().join("out"));
    assert_eq!(output.status.code(), Some(0));
    let class: Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(class["kind"], "OutOfScope");
}

#[test]
fn malformed_config_exits_two_with_key_and_line() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "bad.toml", "seed = 1\n\n[grid]\nN = \"many\"\n");
    let output = run("classify", &config, &dir.path().join("out"));
    assert_eq!(output.status.code(), Some(2));
    let message = stderr(&output);
    assert!(message.contains("grid.N") && message.contains("line 4"), "{message}");

    let config = write_config(dir.path(), "typo.toml", "[profile]\nell = 2.0\nsigma3 = 0.5\n");
    let output = run("classify", &config, &dir.path().join("out"));
    assert_eq!(output.status.code(), Some(2));
    let message = stderr(&output);
    assert!(message.contains("sigma3") && message.contains("line 3"), "{message}");

    let output = run("classify", &dir.path().join("missing.toml"), &dir.path().join("out"));
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn symbols_pass_on_default_profile() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "default.toml", "");
    let out = dir.path().join("out");
    let output = run("symbols", &config, &out);
    assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
    let report = read_json(&out.join("symbols.json"));
    assert_eq!(report["passed"], true);
    let fields = report["fields"].as_array().unwrap();
    assert_eq!(fields.len(), 4);
    assert!(fields.iter().all(|f| f["violation_count"] == 0));
    assert!(report["zone_balance"]["second"].as_f64().unwrap().abs() < 1e-12);
    let sidecar = read_json(&out.join("lambda.bin.json"));
    assert_eq!(sidecar["columns"], serde_json::json!(["t", "x", "xi", "lambda"]));
    assert!(out.join("manifest.json").exists());
}

#[test]
fn symbols_flag_misdeclared_orders() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "mis.toml", "[symbols]\norder_offset = 1.0\n");
    let out = dir.path().join("out");
    let output = run("symbols", &config, &out);
    assert_eq!(output.status.code(), Some(1), "{}", stderr(&output));
    let report = read_json(&out.join("symbols.json"));
    assert_eq!(report["passed"], false);
    let first = &report["fields"][0];
    assert!(first["violation_count"].as_u64().unwrap() > 0);
    assert!(!first["violations"].as_array().unwrap().is_empty());
}

#[test]
fn symbols_reject_unsupported_derivative_depth() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "deep.toml", "[symbols]\nalpha_max = 5\n");
    let output = run("symbols", &config, &dir.path().join("out"));
    assert_eq!(output.status.code(), Some(2));
    assert!(stderr(&output).contains("symbols.alpha_max"));
}

#[test]
fn invert_writes_ladder_and_slope() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "invert.toml", "[invert]\nN = 64\n");
    let out = dir.path().join("out");
    let output = run("invert", &config, &out);
    assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
    let csv = fs::read_to_string(out.join("ladder.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("h,residual_norm,invertible,neumann_terms,inverse_defect"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 7);
    let norms: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(norms.iter().all(|&r| r > 0.0 && r < 1.0));
    let report = read_json(&out.join("invert.json"));
    assert!(report["slope"].as_f64().unwrap() < 0.0);
    assert_eq!(report["h0"].as_f64(), Some(1.0));
}

#[test]
fn invert_fails_check_when_residual_stays_large() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "big.toml", "[consts]\nM2 = 5.0\n\n[invert]\nN = 64\nh_ladder = [1.0, 2.0]\n");
    let out = dir.path().join("out");
    let output = run("invert", &config, &out);
    assert_eq!(output.status.code(), Some(1), "{}", stderr(&output));
    let report = read_json(&out.join("invert.json"));
    assert_eq!(report["passed"], false);
    assert_eq!(report["h0"], Value::Null);
}

#[test]
fn evolve_conserves_free_flow() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "free.toml", &format!("{SMALL_GRID}\n[model]\nA2_imag = 0.0\n"));
    let out = dir.path().join("out");
    let output = run("evolve", &config, &out);
    assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
    let report = read_json(&out.join("evolve.json"));
    assert_eq!(report["conservation"]["passed"], true);
    assert!(report["conservation"]["max_drift"].as_f64().unwrap() <= 1e-8);
    assert_eq!(report["energy"]["passed"], true);
    let csv = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(csv.starts_with("t,l2,hm,gevrey,rho_fit,q_hat_running\n"));
    assert!(out.join("spectra.bin").exists());
}

#[test]
fn evolve_json_format_skips_csv() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "json.toml", &format!("{SMALL_GRID}\n[output]\nformat = \"json\"\n"));
    let out = dir.path().join("out");
    let output = run("evolve", &config, &out);
    assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
    assert!(!out.join("trace.csv").exists());
    let trace = read_json(&out.join("trace.json"));
    assert!(!trace["l2"].as_array().unwrap().is_empty());
}

#[test]
fn probe_writes_one_report_per_theta() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "probe.toml", &format!("{SMALL_GRID}\n[probe]\ntheta_list = [1.05, 1.5]\n"));
    let out = dir.path().join("out");
    let output = run("probe", &config, &out);
    assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
    for theta in ["1.05", "1.5"] {
        let report = read_json(&out.join(format!("probe_theta_{theta}.json")));
        assert_eq!(report["theta_tested"].as_f64(), Some(theta.parse().unwrap()));
        assert!(report["q_hat"].as_f64().unwrap() >= 0.0);
        assert!(out.join(format!("probe_theta_{theta}.csv")).exists());
    }
    assert_eq!(read_json(&out.join("probe.json")).as_array().unwrap().len(), 2);
}

#[test]
fn outputs_are_deterministic_and_reproducible_from_manifest() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "run.toml", &format!("seed = 7\n{SMALL_GRID}\n[invert]\nN = 32\nh_ladder = [1.0, 4.0]\n"));
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let replay = dir.path().join("replay");
    for command in ["evolve", "invert"] {
        assert_eq!(run(command, &config, &first).status.code(), Some(0));
        assert_eq!(run(command, &config, &second).status.code(), Some(0));
    }
    let manifest = first.join("manifest.json");
    for command in ["evolve", "invert"] {
        assert_eq!(run(command, &manifest, &replay).status.code(), Some(0));
    }
    for file in ["trace.csv", "ladder.csv", "evolve.json", "invert.json", "spectra.bin"] {
        let reference = fs::read(first.join(file)).unwrap();
        assert_eq!(reference, fs::read(second.join(file)).unwrap(), "{file} differs between runs");
        assert_eq!(reference, fs::read(replay.join(file)).unwrap(), "{file} differs after replay");
    }
    let mut original = read_json(&manifest);
    let mut replayed = read_json(&replay.join("manifest.json"));
    assert_eq!(original["seed"], 7);
    assert!(original["time"]["dt"].as_f64().unwrap() > 0.0);
    assert!(original["consts"]["Me2"].as_f64().unwrap() > 0.0);
    original["output"]["dir"] = Value::Null;
    replayed["output"]["dir"] = Value::Null;
    assert_eq!(original, replayed);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "seed.toml", "seed = 3\n[invert]\nN = 32\nh_ladder = [1.0]\n");
    let out = dir.path().join("out");
    let output = gevolab(&["invert", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "11"]);
    assert_eq!(output.status.code(), Some(0), "{}", stderr(&output));
    assert_eq!(read_json(&out.join("manifest.json"))["seed"], 11);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(gevolab(&["transmogrify"]).status.code(), Some(2));
    assert_eq!(gevolab(&["evolve"]).status.code(), Some(2));
}

#[test]
fn shipped_configs_classify() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = TempDir::new().unwrap();
    let mut seen = 0;
    for entry in fs::read_dir(&configs).unwrap() {
        let path = entry.unwrap().path();
        let output = run("classify", &path, &dir.path().join("out"));
        assert_eq!(output.status.code(), Some(0), "{}: {}", path.display(), stderr(&output));
        seen += 1;
    }
    assert!(seen >= 4);
}
