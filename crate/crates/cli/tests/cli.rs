use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_backoff-lab"));
    c.env_remove("BACKOFF_LAB_OUT");
    c
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("backoff-lab-test-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn run(args: &[&str], out: &PathBuf) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn classify_beb_is_suitable() {
    let out = scratch("classify");
    let o = run(&["classify", "--seq", "beb", "--lambda", "0.5"], &out);
    assert!(o.status.success());
    let v = stdout_json(&o);
    assert_eq!(v["result"]["case"], "suitable");
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["config"]["lambda"], 0.5);
    assert!(out.join("classify.json").exists());
}

#[test]
fn time_reversal_passes() {
    let out = scratch("reversal");
    let o = run(&["verify", "time-reversal", "--tau-end", "4", "--max-bin", "3"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["pass"], true);
}

#[test]
fn invalid_lambda_is_rejected() {
    let out = scratch("lambda");
    let o = run(&["simulate", "backoff", "--lambda", "1.0"], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("(0, 1)"));
    let o = run(&["classify", "--seq", "constant:1.5"], &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_round_trips_through_embedded_config() {
    let a = scratch("sim-a");
    let o = run(&["simulate", "backoff", "--seq", "beb", "--lambda", "0.6", "--steps", "2000", "--seed", "7", "--stride", "10"], &a);
    assert!(o.status.success());
    let header = std::fs::read_to_string(a.join("backoff-7-summary.csv")).unwrap();
    assert!(header.starts_with("schema_version,derivation_version,seed"));
    let b = scratch("sim-b");
    let cfg = a.join("backoff-7.json");
    let o2 = run(&["simulate", "backoff", "--config", cfg.to_str().unwrap()], &b);
    assert!(o2.status.success());
    for f in ["backoff-7.jsonl", "backoff-7-summary.csv", "backoff-7.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn env_sets_default_output_dir() {
    let d = scratch("env");
    let o = bin().args(["simulate", "jammed", "--steps", "50", "--j-obs", "8"]).env("BACKOFF_LAB_OUT", &d).output().unwrap();
    assert!(o.status.success());
    assert!(d.join("jammed-0.jsonl").exists());
}

#[test]
fn blocks_dump_writes_csv() {
    let out = scratch("blocks");
    let cfg = out.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"sequence": {"kind": "binary-exponential"}, "blocks": {"overrides": {"kappa": 3, "i0": 1, "zeta": 32.0, "tau_init": 3114, "c_init": 1}, "max_block": 5, "horizon": 1000}}"#,
    )
    .unwrap();
    let o = run(&["blocks", "dump", "--config", cfg.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("blocks.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "i,lo,hi,weight,weight_ceil,tau");
    assert_eq!(lines[1], "1,1,1,2.0,2,48");
    assert_eq!(lines[2], "2,2,3,12.0,12,3114");
}

#[test]
fn failed_experiment_exits_nonzero() {
    // zeta = 0 makes every ball unstick at every step, so no Fill set is large.
    let out = scratch("fill");
    let cfg = out.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"replicas": 200, "t0": 10, "blocks": {"overrides": {"kappa": 3, "i0": 1, "zeta": 0.0, "tau_init": 1, "c_init": 1}, "max_block": 5, "horizon": 1000}}"#,
    )
    .unwrap();
    let o = run(&["experiment", "fill-domination", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["pass"], false);
}

#[test]
fn fill_domination_passes_on_scaled_table() {
    let out = scratch("fill-ok");
    let cfg = out.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"replicas": 300, "t0": 10, "blocks": {"overrides": {"kappa": 3, "i0": 1, "zeta": 32.0, "tau_init": 3114, "c_init": 1}, "max_block": 5, "horizon": 1000}}"#,
    )
    .unwrap();
    let o = run(&["experiment", "fill-domination", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["result"]["report"]["bins"], serde_json::json!([4, 9]));
}
