use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn smcvi(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smcvi"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) {
    let out = smcvi(args, cwd);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Every file under `dir` except the manifest, keyed by relative path.
fn contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
                if rel != "manifest.json" {
                    out.insert(rel, fs::read(&p).unwrap());
                }
            }
        }
    }
    out
}

const SMALL_LGSS: &str = r#"
model = "lgss"
seed = 11
[lgss]
dx = 3
dy = 2
horizon = 15
train_series = 3
test_series = 2
[train]
iterations = 4
checkpoint_every = 2
particles = 8
[density]
particles = 8
repetitions = 4
[density.x]
points = 3
[density.y]
step = 1
points = 4
"#;

fn small_lgss(tmp: &Path) -> PathBuf {
    let cfg = write_config(tmp, "lgss.toml", SMALL_LGSS);
    ok(&["--config", cfg.to_str().unwrap(), "--out", "data", "simulate"], tmp);
    cfg
}

#[test]
fn lgss_simulate_writes_ten_train_and_ten_test_series() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "model = \"lgss\"\nseed = 1\n");
    ok(&["--config", cfg.to_str().unwrap(), "--out", "d", "simulate"], tmp.path());
    for prefix in ["train", "test"] {
        for i in 0..10 {
            let text = fs::read_to_string(tmp.path().join(format!("d/{prefix}_{i}.csv"))).unwrap();
            let lines: Vec<&str> = text.lines().collect();
            assert_eq!(lines.len(), 12, "header plus M + 1 = 11 rows");
            assert_eq!(lines[1].split(',').count(), 3);
        }
        assert!(!tmp.path().join(format!("d/{prefix}_10.csv")).exists());
    }
}

#[test]
fn hawkes_simulate_writes_strictly_increasing_times() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "h.toml",
        "model = \"hawkes\"\nseed = 2\n[hawkes]\ndims = 4\ntrain_events = 400\ntest_events = 100\n",
    );
    ok(&["--config", cfg.to_str().unwrap(), "--out", "d", "simulate"], tmp.path());
    let mut times = Vec::new();
    for file in ["events.csv", "test_events.csv"] {
        let text = fs::read_to_string(tmp.path().join("d").join(file)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("timestamp_seconds,mark"));
        for line in lines {
            let (t, c) = line.split_once(',').unwrap();
            times.push(t.parse::<f64>().unwrap());
            let mark: usize = c.parse().unwrap();
            assert!((1..=4).contains(&mark));
        }
    }
    assert_eq!(times.len(), 500);
    assert!(times.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn stochvol_simulate_writes_a_100_by_3_matrix() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.toml", "model = \"stochvol\"\n[stochvol]\ndim = 3\nlength = 100\n");
    ok(&["--config", cfg.to_str().unwrap(), "--out", "d", "simulate"], tmp.path());
    let text = fs::read_to_string(tmp.path().join("d/series.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r.split(',').count() == 3));
}

#[test]
fn unknown_config_key_exits_with_status_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "model = \"lgss\"\n[train]\nlearning_rate = 0.1\n");
    let out = smcvi(&["--config", cfg.to_str().unwrap(), "simulate"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn unknown_model_kind_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "model = \"garch\"\n");
    assert_eq!(smcvi(&["--config", cfg.to_str().unwrap(), "simulate"], tmp.path()).status.code(), Some(2));
    let cfg = write_config(tmp.path(), "d.toml", "model = \"lgss\"\n");
    let out = smcvi(&["--config", cfg.to_str().unwrap(), "--model", "garch", "fit"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numeric_failure_exits_with_status_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.toml",
        "model = \"lgss\"\n[lgss]\nhorizon = 5\ntrain_series = 1\ntest_series = 1\n[train]\nstep_size = 1e300\niterations = 3\n",
    );
    let c = cfg.to_str().unwrap();
    ok(&["--config", c, "--out", "d", "simulate"], tmp.path());
    let out = smcvi(&["--config", c, "--data", "d", "--out", "f", "fit"], tmp.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn zero_iteration_fit_is_a_no_op() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_lgss(tmp.path());
    let c = cfg.to_str().unwrap();
    ok(&["--config", c, "--data", "data", "--out", "a", "fit"], tmp.path());
    let text = fs::read_to_string(cfg.as_path()).unwrap().replace("iterations = 4", "iterations = 0");
    let zero = write_config(tmp.path(), "zero.toml", &text);
    ok(&["--config", zero.to_str().unwrap(), "--data", "data", "--out", "z", "fit"], tmp.path());
    let trace = fs::read_to_string(tmp.path().join("z/trace.csv")).unwrap();
    assert_eq!(trace.trim(), "iteration,elbo,log_z,kl_term");
    let state = json(&tmp.path().join("z/final.json"));
    assert_eq!(state["iteration"], 0);
    // the untouched state is the one the full run started from
    let first = json(&tmp.path().join("a/checkpoints/iter_000002.json"));
    assert_ne!(state["family"], first["family"]);
    assert_eq!(state["adam"]["t"], 0);
}

#[test]
fn resumed_fit_reproduces_the_uninterrupted_trace() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_lgss(tmp.path());
    let c = cfg.to_str().unwrap();
    ok(&["--config", c, "--data", "data", "--out", "full", "fit"], tmp.path());
    ok(
        &["--config", c, "--data", "data", "--out", "resumed", "fit", "--resume", "full/checkpoints/iter_000002.json"],
        tmp.path(),
    );
    let full = fs::read_to_string(tmp.path().join("full/trace.csv")).unwrap();
    let resumed = fs::read_to_string(tmp.path().join("resumed/trace.csv")).unwrap();
    let tail: Vec<&str> = full.lines().skip(3).collect();
    let again: Vec<&str> = resumed.lines().skip(1).collect();
    assert_eq!(tail.len(), 2);
    assert_eq!(tail, again);
    assert_eq!(
        fs::read(tmp.path().join("full/final.json")).unwrap(),
        fs::read(tmp.path().join("resumed/final.json")).unwrap()
    );
}

#[test]
fn kalman_llh_at_the_truth_matches_the_stored_value() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_lgss(tmp.path());
    ok(&["--config", cfg.to_str().unwrap(), "--data", "data", "--out", "e", "evaluate", "kalman-llh"], tmp.path());
    let truth = json(&tmp.path().join("data/truth.json"));
    let report = json(&tmp.path().join("e/kalman_llh.json"));
    assert_eq!(report["source"], "truth");
    assert_eq!(report["test_loglik"].as_f64(), truth["test_loglik"].as_f64());
    assert_eq!(report["train_loglik"].as_f64(), truth["train_loglik"].as_f64());
    assert_eq!(report["test_per_series"], truth["test_per_series"]);
}

#[test]
fn density_grid_emits_xyz_rows_and_a_header() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_lgss(tmp.path());
    ok(&["--config", cfg.to_str().unwrap(), "--data", "data", "--out", "g", "density"], tmp.path());
    let text = fs::read_to_string(tmp.path().join("g/density.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,y,value"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.len() == 3 && r[2].is_finite() && r[2] >= 0.0));
    let header = json(&tmp.path().join("g/density_header.json"));
    assert_eq!(header["fixed"].as_array().unwrap().len(), 2);
    assert_eq!(header["x"]["points"], 3);
}

#[test]
fn predictive_llh_json_carries_its_settings() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "s.toml",
        "model = \"stochvol\"\nseed = 4\n[stochvol]\ndim = 2\nlength = 40\n[evaluate]\np = 2\ns = 2\nk = 30\npoints = 4\nrepeats = 3\n",
    );
    let c = cfg.to_str().unwrap();
    ok(&["--config", c, "--out", "d", "simulate"], tmp.path());
    ok(&["--config", c, "--data", "d", "--out", "e", "evaluate", "predictive-llh"], tmp.path());
    let r = json(&tmp.path().join("e/predictive_llh.json"));
    assert_eq!(r["S"], 2);
    assert_eq!(r["K"], 30);
    assert_eq!(r["p"], 2);
    assert!(r["mean"].as_f64().unwrap().is_finite());
    assert!(r["std"].as_f64().unwrap() >= 0.0);
    assert_eq!(r["per_point"].as_array().unwrap().len(), 4);
    assert_eq!(r["conditioning_points"], serde_json::json!([34, 35, 36, 37]));
}

#[test]
fn manifest_lists_every_output() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_lgss(tmp.path());
    ok(&["--config", cfg.to_str().unwrap(), "--data", "data", "--out", "f", "fit"], tmp.path());
    for dir in ["data", "f"] {
        let m = json(&tmp.path().join(dir).join("manifest.json"));
        let mut listed: Vec<String> = m["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
        listed.sort();
        let on_disk: Vec<String> = contents(&tmp.path().join(dir)).into_keys().collect();
        assert_eq!(listed, on_disk);
        assert_eq!(m["seed"], 11);
    }
}

fn run_twice(config: &str, commands: &[&[&str]]) {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", config);
    let c = cfg.to_str().unwrap();
    for round in ["one", "two"] {
        for cmd in commands {
            let mut args = vec!["--config", c];
            let out = format!("{round}/{}", cmd[0]);
            let data = format!("{round}/simulate");
            args.extend(["--out", out.as_str(), "--data", data.as_str()]);
            args.extend(cmd.iter().copied());
            ok(&args, tmp.path());
        }
    }
    for cmd in commands {
        let a = contents(&tmp.path().join("one").join(cmd[0]));
        let b = contents(&tmp.path().join("two").join(cmd[0]));
        assert!(!a.is_empty());
        assert_eq!(a, b, "{cmd:?} is not reproducible");
    }
}

#[test]
fn lgss_commands_are_byte_identical_across_runs() {
    run_twice(SMALL_LGSS, &[&["simulate"], &["fit"], &["evaluate", "kalman-llh"], &["density"]]);
}

#[test]
fn stochvol_commands_are_byte_identical_across_runs() {
    run_twice(
        "model = \"stochvol\"\nseed = 9\n[stochvol]\ndim = 2\nlength = 30\n[train]\niterations = 2\nparticles = 8\n[evaluate]\ns = 2\nk = 16\npoints = 3\nrepeats = 2\n",
        &[&["simulate"], &["fit"], &["predict"]],
    );
}

#[test]
fn hawkes_commands_are_byte_identical_across_runs() {
    run_twice(
        "model = \"hawkes\"\nseed = 5\n[hawkes]\ndims = 2\ntrain_events = 120\ntest_events = 20\nbatch_len = 60\nrefresh_every = 1\n[train]\niterations = 2\nparticles = 6\n[evaluate]\ns = 2\nk = 6\nj = 3\n",
        &[&["simulate"], &["fit"], &["hawkes-predict"]],
    );
}
