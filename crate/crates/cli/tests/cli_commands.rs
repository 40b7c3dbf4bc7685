use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dapspp_cli::runner;
use dapspp_cli::{ArrayFile, RunConfig};

fn dapspp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dapspp")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn run_in(dir: &Path, config: &str, sub: &str) -> Output {
    let cfg = write_config(dir, config);
    let out = dir.join("out");
    dapspp(&[sub, "--config", &cfg, "--out", out.to_str().unwrap()])
}

#[test]
fn minimal_run_writes_three_files() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(tmp.path(), r#"{"preset": "minimal", "seeds": [3]}"#, "run");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let seed = tmp.path().join("out/seed_3");
    for f in ["trace.csv", "final.dpx", "summary.json"] {
        assert!(seed.join(f).is_file(), "{f} missing");
    }
    let fin = ArrayFile::read(&seed.join("final.dpx")).unwrap();
    assert_eq!(fin.shape, vec![4, 4]);
}

#[test]
fn zero_rho_is_a_config_error_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(tmp.path(), r#"{"preset": "minimal", "schedule": {"rho": 0.0}}"#, "run");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rho"));
}

#[test]
fn malformed_configs_exit_with_status_two() {
    let tmp = tempfile::tempdir().unwrap();
    for text in ["{", r#"{"preset": "minimal", "extra": 1}"#, r#"{"preset": "minimal", "seeds": []}"#] {
        assert_eq!(run_in(tmp.path(), text, "run").status.code(), Some(2), "{text}");
    }
    let missing = dapspp(&["run", "--config", "/nonexistent/config.json", "--out", "/tmp/x"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn divergent_step_size_exits_with_status_three() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(tmp.path(), r#"{"preset": "minimal", "step_size": {"eta0": 1000.0}, "refine": {"n_steps": 60}}"#, "run");
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn same_seed_gives_identical_final_state() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"preset": "minimal", "seeds": [5, 6]}"#);
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        assert!(dapspp(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
        bytes.push(fs::read(out.join("seed_5/final.dpx")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn seeds_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"preset": "minimal"}"#);
    let out = tmp.path().join("out");
    let o = dapspp(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", "1,2", "--threads", "2"]);
    assert!(o.status.success());
    assert!(out.join("seed_1").is_dir() && out.join("seed_2").is_dir() && !out.join("seed_0").exists());
    let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 3);
}

#[test]
fn summary_nfe_matches_trace() {
    let tmp = tempfile::tempdir().unwrap();
    for sampler in ["dapspp", "daps", "dps"] {
        let text = format!(r#"{{"preset": "minimal", "sampler": "{sampler}"}}"#);
        assert!(run_in(tmp.path(), &text, "run").status.success());
        let dir = tmp.path().join("out/seed_0");
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
        let mut rdr = csv::Reader::from_path(dir.join("trace.csv")).unwrap();
        let headers = rdr.headers().unwrap().clone();
        let nfe_col = headers.iter().position(|h| h == "nfe").unwrap();
        let last = rdr
            .records()
            .map(|r| r.unwrap())
            .filter(|r| &r[0] == "cycle")
            .last()
            .unwrap();
        assert_eq!(summary["nfe"].as_u64().unwrap(), last[nfe_col].parse::<u64>().unwrap(), "{sampler}");
    }
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"preset": "minimal"}"#);
    let out = tmp.path().join("sweep");
    let o = dapspp(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--param", "sigma_bar", "--values", "0.2,0.5,1,2,5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let nfe: Vec<u64> = rdr.records().map(|r| r.unwrap()[3].parse().unwrap()).collect();
    assert_eq!(nfe.len(), 5);
    assert!(nfe.windows(2).all(|w| w[0] <= w[1]), "{nfe:?}");
    assert!(out.join("sigma_bar_0.2/seed_0/trace.csv").is_file());
}

#[test]
fn sweep_rejects_empty_values_and_unknown_params() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"preset": "minimal"}"#);
    let out = tmp.path().join("sweep");
    let o = dapspp(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--param", "rho", "--values", ""]);
    assert_eq!(o.status.code(), Some(2));
    let o = dapspp(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--param", "rho"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dapspp(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--param", "tau", "--values", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = dapspp(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--param", "J", "--values", "2.5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_parameters_map_onto_config() {
    let cfg = RunConfig::preset("minimal").unwrap();
    assert_eq!(runner::with_param(&cfg, "K", 20.0).unwrap().schedule.n_steps, 21);
    assert_eq!(runner::with_param(&cfg, "J", 7.0).unwrap().refine.n_steps, 7);
    assert_eq!(runner::with_param(&cfg, "rho", 5.0).unwrap().schedule.rho, 5.0);
    let g = runner::with_param(&cfg, "gamma", 0.02).unwrap();
    assert!((g.sigma_bar().unwrap() - 0.2).abs() < 1e-12);
    assert!(runner::with_param(&cfg, "rho", 0.0).is_err());
}

#[test]
fn diagnose_on_blur_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(tmp.path(), r#"{"preset": "gaussian_blur"}"#, "diagnose");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = tmp.path().join("out/seed_0");
    let mut rdr = csv::Reader::from_path(dir.join("diagnostics.csv")).unwrap();
    let h = rdr.headers().unwrap().clone();
    let col = |name: &str| h.iter().position(|c| c == name).unwrap();
    let (k, eq) = (col("kappa"), col("equiv_max_abs_diff"));
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 50);
    for r in &rows {
        assert!(r[k].parse::<f64>().unwrap() > 1.0, "kappa {}", &r[k]);
        assert!(r[eq].parse::<f64>().unwrap() <= 1e-9);
    }
    let warm = fs::read_to_string(dir.join("warm_start.csv")).unwrap();
    assert_eq!(warm.lines().count(), 5);
    // deterministic under a fixed seed
    let first = fs::read(dir.join("diagnostics.csv")).unwrap();
    assert!(run_in(tmp.path(), r#"{"preset": "gaussian_blur"}"#, "diagnose").status.success());
    assert_eq!(first, fs::read(dir.join("diagnostics.csv")).unwrap());
}

#[test]
fn oracle_check_exports_a_loadable_prior() {
    let tmp = tempfile::tempdir().unwrap();
    let seeds: Vec<String> = (0..40).map(|s| s.to_string()).collect();
    let cfg = write_config(tmp.path(), r#"{"preset": "posterior2d"}"#);
    let out = tmp.path().join("oracle");
    let o = dapspp(&["oracle-check", "--config", &cfg, "--out", out.to_str().unwrap(), "--seeds", &seeds.join(",")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mean[0]"));
    let prior = fs::read_to_string(out.join("oracle.json")).unwrap();
    let text = format!(r#"{{"preset": "posterior2d", "prior": {prior}}}"#);
    let cfg = RunConfig::from_json_str(&text).unwrap();
    let gmm = cfg.build_prior().unwrap().as_gmm().unwrap();
    assert_eq!(gmm.n_components(), 2);
}
