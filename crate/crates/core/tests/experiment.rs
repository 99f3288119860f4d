use std::fs;
use std::path::{Path, PathBuf};

use popdyn::experiment::{self, read_manifest, sha256_hex, ExperimentConfig, RunOptions, MANIFEST};
use popdyn::Error;

const SMALL: &str = r#"
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
k_list = [50, 100]
replicates = 30
master_seed = 7
grid_intervals = 5
dt = 0.01

[outputs]
dir = "out"
functions = ["total", "age_sum"]
stages = ["simulate", "martingale", "solve_limit"]
event_log = true
"#;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, body).unwrap();
    path
}

fn opts(root: &Path, workers: usize) -> RunOptions {
    RunOptions {
        output_root: Some(root.to_path_buf()),
        workers: Some(workers),
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let a = experiment::run(&cfg, &opts(&tmp.path().join("a"), 1)).unwrap();
    let b = experiment::run(&cfg, &opts(&tmp.path().join("b"), 3)).unwrap();
    let (ta, tb) = (tree(&a.dir), tree(&b.dir));
    assert!(ta.iter().any(|(n, _)| n == "events_K50.json"));
    assert_eq!(ta, tb);
}

#[test]
fn manifest_hashes_every_output_and_report_detects_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = experiment::run(&cfg, &opts(tmp.path(), 2)).unwrap();
    let manifest = read_manifest(&out.dir).unwrap();
    assert_eq!(manifest.config_sha256, sha256_hex(SMALL.as_bytes()));
    assert_eq!(manifest.stages, ["simulate", "martingale", "solve_limit"]);
    let mut listed: Vec<_> = manifest.files.iter().map(|f| f.path.clone()).collect();
    listed.push(MANIFEST.to_string());
    listed.sort();
    let on_disk: Vec<_> = tree(&out.dir).into_iter().map(|(n, _)| n).collect();
    assert_eq!(listed, on_disk);
    for f in &manifest.files {
        assert_eq!(sha256_hex(&fs::read(out.dir.join(&f.path)).unwrap()), f.sha256);
    }
    let report = experiment::report(&out.dir).unwrap();
    assert_eq!(report.passed, out.passed());
    assert!(report.text.contains("martingale"));

    let target = out.dir.join("limit.csv");
    let mut bytes = fs::read(&target).unwrap();
    bytes.extend_from_slice(b"0,0\n");
    fs::write(&target, bytes).unwrap();
    assert!(matches!(experiment::report(&out.dir), Err(Error::Integrity(_))));
}

#[test]
fn limit_only_run_writes_a_single_series() {
    let tmp = tempfile::tempdir().unwrap();
    let body = SMALL
        .replace(r#"stages = ["simulate", "martingale", "solve_limit"]"#, r#"stages = ["solve_limit"]"#)
        .replace("event_log = true\n", "");
    let cfg = write_config(tmp.path(), &body);
    let out = experiment::run(&cfg, &opts(tmp.path(), 1)).unwrap();
    let names: Vec<_> = out.manifest.files.iter().map(|f| f.path.as_str()).collect();
    assert_eq!(names, ["limit.csv"]);
    assert!(out.manifest.verdicts.is_empty());
    let csv = fs::read_to_string(out.dir.join("limit.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 1 + 6);
    // Linear birth-death limit: total mass e^{(b - h) t}.
    let last: Vec<f64> = rows[6].split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(last[0], 1.0);
    assert!((last[1] / 0.2f64.exp() - 1.0).abs() < 1e-4, "{last:?}");
}

#[test]
fn unknown_keys_are_reported_with_their_line() {
    let body = SMALL.replace("master_seed = 7", "master_seed = 7\nseed_typo = 3");
    let err = ExperimentConfig::from_toml(&body, Path::new("exp.toml")).unwrap_err();
    let Error::Config { message, .. } = &err else { panic!("{err:?}") };
    assert!(message.contains("seed_typo"), "{message}");
    assert!(message.contains("line 18"), "{message}");
    assert_eq!(experiment::exit_code(&err), 2);
}

#[test]
fn schema_violations_are_config_errors() {
    for (from, to) in [
        ("k_list = [50, 100]", "k_list = [100, 50]"),
        ("t_end = 1.0", "t_end = -1.0"),
        ("replicates = 30", "replicates = 0"),
        (r#"functions = ["total", "age_sum"]"#, r#"functions = ["nonsense"]"#),
        (r#""simulate", "martingale""#, r#""simulate", "accounting""#),
    ] {
        let body = SMALL.replace(from, to);
        let err = ExperimentConfig::from_toml(&body, Path::new("exp.toml")).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{to}: {err:?}");
    }
}
