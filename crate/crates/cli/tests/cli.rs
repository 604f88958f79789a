use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pedflow::harness::output::read_snapshots;
use pedflow::harness::Manifest;

const TINY: &str = r#"
replicas = 4
n_list = [8, 16]
t_end = 0.2
field_pool = 2
calibration_samples = 500
[moments]
n_list = [4, 8, 16]
replicas = 50
quadrature = 500
[chaos]
bank_size = 16
draws = 2
baseline_draws = 3
"#;

fn pedflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pedflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("cfg.toml");
    fs::write(&path, format!("{extra}\n{TINY}")).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "n_list = [64, 32]").unwrap();
    let o = pedflow(&["couple", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`n_list`"), "{}", stderr(&o));

    fs::write(&path, "[params]\ntheta = 0.3").unwrap();
    let o = pedflow(&["simulate", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("params.theta"));

    let o = pedflow(&["sweep", "--n-override", "32,16"]);
    assert_eq!(o.status.code(), Some(2));
    let o = pedflow(&["sweep", "--threads", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = pedflow(&["sweep", "--seed", "minus-one"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn all_zero_sweep_is_no_signal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    let o = pedflow(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("rate_report.json")).unwrap()).unwrap();
    assert_eq!(report["rate"]["verdict"], "no_signal");
    assert!(out.join("probability.csv").exists());
}

#[test]
fn blow_up_exits_3_and_keeps_the_last_finite_state() {
    let dir = tempfile::tempdir().unwrap();
    // explicit RK4 on v' = -v/T diverges once dt/T is past ~2.8
    let cfg = write_config(dir.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("t_end = 0.2", "t_end = 400.0\ndt = 0.5")
        + "[params]\nreaction_time = 0.1\nu_max = 0.0\n";
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    let o = pedflow(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let dump: serde_json::Value = serde_json::from_slice(&fs::read(out.join("blowup_state.json")).unwrap()).unwrap();
    assert!(dump["step"].as_u64().unwrap() > 0);
    assert!(dump["last_finite"]["newtonian"]["x"].is_array());
}

#[test]
fn zero_horizon_simulate_writes_only_the_initial_frame() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    fs::write(&cfg, fs::read_to_string(&cfg).unwrap().replace("t_end = 0.2", "t_end = 0.0")).unwrap();
    let out = dir.path().join("out");
    let o = pedflow(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, frames) = read_snapshots(&out.join("simulate_n8.bin")).unwrap();
    assert_eq!((header.n, header.records, frames.len()), (8, 1, 1));
    assert_eq!(frames[0].t, 0.0);
}

#[test]
fn a_manifest_reruns_the_experiment_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 5");
    let first = dir.path().join("first");
    let o = pedflow(&["couple", "--config", &cfg, "--out", first.to_str().unwrap(), "--n-override", "8,12"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest_path = first.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path).unwrap()).unwrap();
    assert_eq!(manifest.config.n_list, vec![8, 12]);
    assert_eq!(manifest.config.seed, 5);

    let second = dir.path().join("second");
    let o = pedflow(&["couple", "--config", manifest_path.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let again: Manifest = serde_json::from_slice(&fs::read(second.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(again.config_hash, manifest.config_hash);
    for f in manifest.outputs.iter() {
        assert_eq!(
            fs::read(first.join(&f.path)).unwrap(),
            fs::read(second.join(&f.path)).unwrap(),
            "{}",
            f.path
        );
    }
}

#[test]
fn moments_override_targets_the_moment_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    let o = pedflow(&["moments", "--config", &cfg, "--out", out.to_str().unwrap(), "--n-override", "4,8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("moments_force.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("n,p,moment,"));
}
