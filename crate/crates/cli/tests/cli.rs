use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nemo_ffa::io::Manifest;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_nemo-ffa"));
    c.env_remove("NEMO_FFA_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

/// Simulate with `extra` flags and fit the result; returns (sim dir, fit dir).
fn simulate_and_fit(root: &Path, extra: &[&str]) -> (PathBuf, PathBuf) {
    let sim = root.join("sim");
    let fit = root.join("fit");
    ok(&[&["simulate", "--out", p(&sim)][..], extra].concat());
    let data = sim.join("data.csv");
    ok(&[&["fit", "--data", p(&data), "--out", p(&fit)][..], extra].concat());
    (sim, fit)
}

#[test]
fn defaults_end_to_end_select_two_factors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    ok(&["init", "--out", p(&cfg)]);
    let sim = dir.path().join("sim");
    ok(&["simulate", "--config", p(&cfg), "--out", p(&sim)]);
    let fit = dir.path().join("fit");
    ok(&["fit", "--config", p(&cfg), "--data", p(&sim.join("data.csv")), "--out", p(&fit)]);
    let o = ok(&["summarize", "--run", p(&fit)]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("K_selected = 2"), "{stdout}");
    assert_eq!(fs::read_to_string(fit.join("K_selected")).unwrap(), "2\n");
    for f in ["mu_band.csv", "loading_1_band.csv", "loading_2_band.csv", "ess.csv", "waic.csv", "trace_loglik.csv"] {
        assert!(fit.join(f).is_file(), "{f} missing");
    }
    assert!(!fit.join("loading_3_band.csv").exists());
}

#[test]
fn init_prints_a_loadable_config() {
    let o = ok(&["init"]);
    let cfg = nemo_ffa::config::RunConfig::from_json(&String::from_utf8_lossy(&o.stdout)).unwrap();
    assert_eq!(cfg, nemo_ffa::config::RunConfig::default());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["fit", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_output_directory_is_a_usage_error() {
    let o = run(&["simulate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("NEMO_FFA_OUT"));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"chain": {"seeed": 3}}"#).unwrap();
    let o = run(&["simulate", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seeed"));
}

#[test]
fn fit_on_binary_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(&["simulate", "--model", "binary", "--out", p(&sim)]);
    let o = run(&["fit", "--data", p(&sim.join("data.csv")), "--out", p(&dir.path().join("fit"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("wrong data kind") && err.contains("fit-binary"), "{err}");
}

#[test]
fn malformed_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    fs::write(&data, "subject_id,t,value\na,0,1\na,0,2\n").unwrap();
    let o = run(&["fit", "--data", p(&data), "--out", p(&dir.path().join("fit"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
    let o = run(&["fit", "--data", p(&dir.path().join("absent.csv")), "--out", p(&dir.path().join("fit"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn overflowing_data_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let mut s = String::from("subject_id,t,value\n");
    for i in 0..4 {
        for l in 0..5 {
            let v = if (i + l) % 2 == 0 { 1e300 } else { -1e300 };
            s.push_str(&format!("s{i},{},{v:e}\n", l as f64 / 4.0));
        }
    }
    fs::write(&data, s).unwrap();
    let o = run(&["fit", "--data", p(&data), "--out", p(&dir.path().join("fit")), "--iters", "20", "--burn-in", "5"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unwritable_output_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    fs::write(&file, "x").unwrap();
    let o = run(&["simulate", "--out", p(&file.join("sub"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn summarize_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (_, fit) = simulate_and_fit(dir.path(), &["--iters", "400", "--burn-in", "100", "--seed", "5"]);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["summarize", "--run", p(&fit), "--out", p(&a)]);
    ok(&["summarize", "--run", p(&fit), "--out", p(&b)]);
    let (fa, fb) = (read_dir_bytes(&a), read_dir_bytes(&b));
    assert!(fa.len() > 5);
    assert_eq!(fa, fb);
}

#[test]
fn zero_kept_factors_writes_only_mean_ess_waic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("noise.csv");
    // pure noise around zero: no loading band can exclude zero
    let mut s = String::from("subject_id,t,value\n");
    let mut x: u64 = 12345;
    for i in 0..8 {
        for l in 0..6 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
            s.push_str(&format!("s{i},{},{}\n", l as f64 / 5.0, 0.2 * u));
        }
    }
    fs::write(&data, s).unwrap();
    let fit = dir.path().join("fit");
    ok(&["fit", "--data", p(&data), "--out", p(&fit), "--iters", "400", "--burn-in", "100", "--k-max", "2"]);
    let out = dir.path().join("summary");
    let o = ok(&["summarize", "--run", p(&fit), "--out", p(&out)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("K_selected = 0"));
    let names: Vec<String> = read_dir_bytes(&out).into_keys().collect();
    assert_eq!(names, ["K_selected", "ess.csv", "mu_band.csv", "summary.json", "waic.csv"]);
}

#[test]
fn manifest_reproduces_the_fit() {
    let dir = tempfile::tempdir().unwrap();
    let (sim, fit) = simulate_and_fit(dir.path(), &["--iters", "200", "--burn-in", "50", "--seed", "9"]);
    let m: Manifest = serde_json::from_str(&fs::read_to_string(fit.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.seed, 9);
    assert_eq!(m.version, env!("CARGO_PKG_VERSION"));
    assert_eq!(m.command, "fit");
    let cfg = nemo_ffa::config::RunConfig::load(&fit.join("config.json")).unwrap();
    assert_eq!(m.config_sha256, cfg.hash());
    assert_eq!(cfg.chain.n_iter, 200);

    let again = dir.path().join("again");
    ok(&["fit", "--config", p(&fit.join("config.json")), "--data", p(&sim.join("data.csv")), "--out", p(&again)]);
    assert_eq!(fs::read(fit.join("draws.bin")).unwrap(), fs::read(again.join("draws.bin")).unwrap());
    assert_eq!(fs::read(fit.join("draws.json")).unwrap(), fs::read(again.join("draws.json")).unwrap());
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().env("NEMO_FFA_OUT", dir.path()).args(["simulate", "--seed", "2"]).output().unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("simulate").join("data.csv").is_file());
    assert!(dir.path().join("simulate").join("manifest.json").is_file());
}

#[test]
fn binary_and_regression_pipelines_run() {
    let dir = tempfile::tempdir().unwrap();
    let short = ["--iters", "200", "--burn-in", "50"];

    let sim = dir.path().join("bsim");
    ok(&["simulate", "--model", "binary", "--out", p(&sim)]);
    let fit = dir.path().join("bfit");
    ok(&[&["fit-binary", "--data", p(&sim.join("data.csv")), "--out", p(&fit)][..], &short].concat());
    ok(&["summarize", "--run", p(&fit)]);
    assert!(fit.join("mu_band.csv").is_file());

    let sel = dir.path().join("sel");
    ok(&[&["select-k", "--data", p(&sim.join("data.csv")), "--kind", "binary", "--out", p(&sel)][..], &short].concat());

    let sim = dir.path().join("rsim");
    ok(&["simulate", "--model", "regression", "--out", p(&sim)]);
    let fit = dir.path().join("rfit");
    let data = sim.join("data.csv");
    let cov = sim.join("covariates.csv");
    let head = ["fit-regression", "--data", p(&data), "--covariates", p(&cov), "--out", p(&fit), "--k-max", "1"];
    ok(&[&head[..], &short].concat());
    ok(&["summarize", "--run", p(&fit)]);
    if fit.join("loading_1_band.csv").exists() {
        let text = fs::read_to_string(fit.join("theta_effects.csv")).unwrap();
        assert!(text.starts_with("covariate,t,lower,mean,upper\n"));
    }
    assert!(sel.join("selection.json").is_file() && sel.join("K_selected").is_file());
}
