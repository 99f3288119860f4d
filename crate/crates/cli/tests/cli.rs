use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIRTH_DEATH: &str = r#"
[model]
family = "birth_death"
birth = 0.6
death = 0.4

[[initial.bands]]
kind = 0
age_lo = 0.0
age_hi = 1.0
mass = 1.0

[run]
t_end = 1.0
k_list = [50]
replicates = 10
master_seed = 3
dt = 0.05

[outputs]
dir = "out"
functions = ["total"]
stages = ["simulate", "solve_limit"]
"#;

const ACCOUNTING: &str = r#"
[model]
family = "monogamy_logistic"
couple_beta = 1.5
single_beta = 0.3
fertile_from = 0.5
fertile_to = 3.0
capacity = 4.0
death0 = 0.1
death1 = 0.05
separation = 0.2
rho = 1.0
marriage_from = 0.3
marriage_to = 4.0
ramp = 0.3
max_age = 12.0

[[initial.females]]
age_lo = 0.0
age_hi = 2.0
mass = 0.5

[[initial.males]]
age_lo = 0.0
age_hi = 2.0
mass = 0.5

[run]
t_end = 1.0
k_list = [30]
replicates = 2
master_seed = 3

[outputs]
dir = "acc"
functions = ["head_count"]
stages = ["accounting"]

[checks]
min_events = 1000000000000
"#;

fn popdyn(args: &[&str], root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_popdyn"))
        .args(args)
        .env("POPDYN_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn run_and_report_succeed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bd.toml", BIRTH_DEATH);
    let out = popdyn(&["run", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("out");
    assert!(dir.join("manifest.json").is_file());
    let out = popdyn(&["report", dir.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("no verdict-producing stages"));
}

#[test]
fn output_root_flag_overrides_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bd.toml", BIRTH_DEATH);
    let other = tmp.path().join("elsewhere");
    let out = popdyn(&["run", &cfg, "--output-root", other.to_str().unwrap(), "--workers", "2"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(other.join("out/manifest.json").is_file());
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn failed_check_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "acc.toml", ACCOUNTING);
    let out = popdyn(&["run", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL accounting"));
    let out = popdyn(&["report", tmp.path().join("acc").to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL] audited_events"));
}

#[test]
fn bad_config_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", &BIRTH_DEATH.replace("birth = 0.6", "brith = 0.6"));
    let out = popdyn(&["run", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("brith"));
    let out = popdyn(&["run"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let out = popdyn(&["run", tmp.path().join("missing.toml").to_str().unwrap()], tmp.path());
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn tampered_outputs_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bd.toml", BIRTH_DEATH);
    assert_eq!(popdyn(&["run", &cfg], tmp.path()).status.code(), Some(0));
    let csv = tmp.path().join("out/limit.csv");
    fs::write(&csv, "time\n").unwrap();
    let out = popdyn(&["report", tmp.path().join("out").to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));
}

#[test]
fn validate_lists_conditions() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bd.toml", BIRTH_DEATH);
    let out = popdyn(&["validate", &cfg], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("(C0)") && text.contains("(C1)"), "{text}");
    let out = popdyn(&["validate", &cfg, "--json"], tmp.path());
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(json["entries"].as_array().is_some_and(|e| !e.is_empty()));
}
