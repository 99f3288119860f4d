//! Runs the shipped acceptance configs and prints one PASS/FAIL line per
//! criterion. Exits non-zero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use popdyn::experiment::{self, RunOptions, RunOutcome};
use serde_json::Value;

struct Check {
    stage: String,
    name: String,
    function: String,
    passed: bool,
    detail: String,
}

struct Run {
    outcome: RunOutcome,
    checks: Vec<Check>,
    elapsed: Duration,
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(name: &str, root: &Path, workers: Option<usize>) -> Result<Run, String> {
    let path = configs().join(format!("{name}.toml"));
    let opts = RunOptions {
        output_root: Some(root.to_path_buf()),
        workers,
    };
    let start = Instant::now();
    let outcome = experiment::run(&path, &opts).map_err(|e| format!("{name}: {e}"))?;
    let elapsed = start.elapsed();
    let mut checks = Vec::new();
    for v in &outcome.manifest.verdicts {
        let body = fs::read_to_string(outcome.dir.join(&v.file)).map_err(|e| e.to_string())?;
        let json: Value = serde_json::from_str(&body).map_err(|e| e.to_string())?;
        for c in json["checks"].as_array().into_iter().flatten() {
            checks.push(Check {
                stage: v.stage.clone(),
                name: c["check"].as_str().unwrap_or_default().to_string(),
                function: c["function"].as_str().unwrap_or_default().to_string(),
                passed: c["passed"].as_bool() == Some(true) && c["skipped"].as_bool() != Some(true),
                detail: c["detail"].as_str().unwrap_or_default().to_string(),
            });
        }
    }
    Ok(Run {
        outcome,
        checks,
        elapsed,
    })
}

/// Every check selected by `pick` passes, and at least one was selected.
fn all_pass(run: &Run, pick: impl Fn(&Check) -> bool) -> Result<String, String> {
    let picked: Vec<&Check> = run.checks.iter().filter(|c| pick(c)).collect();
    if picked.is_empty() {
        return Err("no matching checks".into());
    }
    match picked.iter().find(|c| !c.passed) {
        Some(c) => Err(format!("{}/{} {} failed: {}", c.stage, c.name, c.function, c.detail)),
        None => Ok(format!("{} checks", picked.len())),
    }
}

fn within(run: &Run, limit_s: u64) -> Result<String, String> {
    let s = run.elapsed.as_secs_f64();
    if s <= limit_s as f64 {
        Ok(format!("{s:.1}s of {limit_s}s"))
    } else {
        Err(format!("took {s:.1}s, limit {limit_s}s"))
    }
}

fn join(parts: Vec<Result<String, String>>) -> Result<String, String> {
    let mut ok = Vec::new();
    for p in parts {
        ok.push(p?);
    }
    Ok(ok.join(", "))
}

fn snapshot(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| e.to_string())? {
        let e = e.map_err(|e| e.to_string())?;
        out.push((
            e.file_name().to_string_lossy().into_owned(),
            fs::read(e.path()).map_err(|e| e.to_string())?,
        ));
    }
    out.sort();
    Ok(out)
}

fn determinism(root: &Path) -> Result<String, String> {
    let name = "criterion-10-determinism";
    let mut reference: Option<Vec<(String, Vec<u8>)>> = None;
    for (i, workers) in [1usize, 4, 16, 1].into_iter().enumerate() {
        let r = run(name, &root.join(format!("w{i}")), Some(workers))?;
        let files = snapshot(&r.outcome.dir)?;
        match &reference {
            None => reference = Some(files),
            Some(first) if *first != files => {
                return Err(format!("outputs at {workers} workers differ from the first run"));
            }
            Some(_) => {}
        }
    }
    let n = reference.map_or(0, |f| f.len());
    Ok(format!("{n} files identical at 1, 4, 16 workers and on re-run"))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path();
    let mut results: Vec<(u32, &str, Result<String, String>)> = Vec::new();

    match run("criterion-01-02-martingale", root, None) {
        Ok(r) => {
            results.push((
                1,
                "martingale compensation",
                join(vec![all_pass(&r, |c| c.name == "martingale_mean"), within(&r, 120)]),
            ));
            results.push((
                2,
                "quadratic variation",
                join(vec![
                    all_pass(&r, |c| c.name == "qv_match" && c.function == "total"),
                    all_pass(&r, |c| c.name.starts_with("qv_closed_form")),
                ]),
            ));
        }
        Err(e) => {
            results.push((1, "martingale compensation", Err(e.clone())));
            results.push((2, "quadratic variation", Err(e)));
        }
    }

    let single = |n: u32, label: &'static str, cfg: &str, stage: &'static str, limit: Option<u64>| {
        let res = run(cfg, root, None).and_then(|r| {
            let mut parts = vec![all_pass(&r, |c| c.stage == stage)];
            if let Some(l) = limit {
                parts.push(within(&r, l));
            }
            join(parts)
        });
        (n, label, res)
    };
    results.push(single(3, "law of large numbers", "criterion-03-lln", "lln", Some(600)));
    results.push(single(4, "solver cross-validation", "criterion-04-solvers", "solver_check", None));

    let clt = (|| {
        let a = run("birth-death-clt", root, None)?;
        let b = run("criterion-05-logistic-clt", root, None)?;
        let total = a.elapsed + b.elapsed;
        join(vec![
            all_pass(&a, |c| c.stage == "clt_report"),
            all_pass(&b, |c| c.stage == "clt_report"),
            if total.as_secs_f64() <= 1200.0 {
                Ok(format!("{:.1}s of 1200s", total.as_secs_f64()))
            } else {
                Err(format!("took {:.1}s, limit 1200s", total.as_secs_f64()))
            },
        ])
    })();
    results.push((5, "central limit theorem", clt));

    results.push(single(6, "immigration invariance", "criterion-06-immigration", "immigration", None));
    results.push(single(7, "monogamy accounting", "criterion-07-accounting", "accounting", None));
    results.push(single(8, "monogamy law of large numbers", "criterion-08-monogamy-lln", "monogamy_lln", None));
    results.push((
        9,
        "monogamy quadratic variation",
        run("criterion-09-monogamy-qv", root, None).and_then(|r| all_pass(&r, |c| c.name == "qv")),
    ));
    results.push((10, "determinism", determinism(&root.join("determinism"))));

    let mut failed = 0;
    for (n, label, res) in &results {
        match res {
            Ok(msg) => println!("PASS criterion {n:>2} {label}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {n:>2} {label}: {msg}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
