//! Experiment files, stage orchestration and reproducible outputs.
//!
//! A run reads a TOML config, executes the requested stages in dependency
//! order and writes CSV series, JSON verdicts and a manifest hashing every
//! output. Replicates draw from streams keyed by `(master_seed, K,
//! replicate)` and results are gathered in input order, so outputs are
//! byte-identical for any worker count.

pub mod config;
pub mod output;
mod stages;
pub mod validate;

use std::path::{Path, PathBuf};

pub use config::{CheckConfig, ExperimentConfig, FunctionSpec, ModelConfig, Stage, VarianceReference};
pub use output::{read_manifest, sha256_hex, FileEntry, RunManifest, VerdictEntry, MANIFEST};
pub use validate::{validate, ConditionEntry, Status, ValidationReport};

use crate::error::{Error, Result};
use output::Emitter;
use stages::Context;

/// Environment variable that overrides the output root.
pub const OUTPUT_ROOT_ENV: &str = "POPDYN_OUTPUT_ROOT";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory that `outputs.dir` is resolved against.
    pub output_root: Option<PathBuf>,
    /// Overrides `run.workers`.
    pub workers: Option<usize>,
}

impl RunOptions {
    pub fn from_env() -> Self {
        RunOptions {
            output_root: std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from),
            workers: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl RunOutcome {
    pub fn passed(&self) -> bool {
        self.manifest.passed
    }
}

/// Process exit code for an error: 2 for usage and configuration errors,
/// 3 for runtime failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Contract(_) => 2,
        _ => 3,
    }
}

pub fn run(config_path: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    let (cfg, text) = ExperimentConfig::load(config_path)?;
    run_config(&cfg, &text, config_path, opts)
}

/// Runs an already parsed config; `text` is the source that gets hashed.
pub fn run_config(cfg: &ExperimentConfig, text: &str, config_path: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    let report = validate(cfg);
    if !report.hard_failures.is_empty() {
        return Err(Error::Config {
            path: config_path.to_path_buf(),
            message: report.hard_failures.join("; "),
        });
    }
    let dir = cfg.output_dir(opts.output_root.as_deref());
    let workers = opts.workers.or(cfg.run.workers);
    let mut em = Emitter::create(&dir)?;
    let stages = cfg.stages();
    let verdicts = {
        let mut ctx = Context::new(cfg, &mut em, workers)?;
        for &s in &stages {
            ctx.run(s)?;
        }
        ctx.verdicts
    };
    let manifest = RunManifest {
        tool: "popdyn".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: sha256_hex(text.as_bytes()),
        master_seed: cfg.run.master_seed,
        streams: "ChaCha8 keyed by master_seed, stream (K, replicate); auxiliary streams by purpose".into(),
        k_list: cfg.run.k_list.clone(),
        replicates: cfg.run.replicates,
        stages: stages.iter().map(|s| s.name().to_string()).collect(),
        passed: verdicts.iter().all(|v| v.2),
        verdicts: verdicts
            .into_iter()
            .map(|(s, file, passed)| VerdictEntry {
                stage: s.name().into(),
                file,
                passed,
            })
            .collect(),
        files: em.files().to_vec(),
    };
    em.finish(&manifest)?;
    Ok(RunOutcome { dir, manifest })
}

#[derive(Clone, Debug)]
pub struct ReportOutcome {
    pub text: String,
    pub passed: bool,
}

/// Re-renders the verdicts of a finished run after checking every output
/// against its manifest hash.
pub fn report(dir: &Path) -> Result<ReportOutcome> {
    let manifest = read_manifest(dir)?;
    for f in &manifest.files {
        let path = dir.join(&f.path);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != f.sha256 {
            return Err(Error::Integrity(format!("{} does not match its manifest hash", f.path)));
        }
    }
    let mut text = format!(
        "run {} (config {}, master seed {})\n",
        dir.display(),
        &manifest.config_sha256[..12],
        manifest.master_seed
    );
    let mut passed = true;
    for v in &manifest.verdicts {
        let path = dir.join(&v.file);
        let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let json: serde_json::Value = serde_json::from_str(&body).map_err(|e| Error::Serde(e.to_string()))?;
        let ok = json["passed"].as_bool().unwrap_or(false);
        passed &= ok;
        text.push_str(&format!("{} {}\n", if ok { "PASS" } else { "FAIL" }, v.stage));
        for c in json["checks"].as_array().into_iter().flatten() {
            let mark = if c["skipped"].as_bool() == Some(true) {
                "skip"
            } else if c["passed"].as_bool() == Some(true) {
                "pass"
            } else {
                "FAIL"
            };
            text.push_str(&format!(
                "  [{mark}] {} {} t={} statistic={} threshold={} {}\n",
                c["check"].as_str().unwrap_or("?"),
                c["function"].as_str().unwrap_or("?"),
                c["time"],
                c["statistic"],
                c["threshold"],
                c["detail"].as_str().unwrap_or("")
            ));
        }
    }
    if manifest.verdicts.is_empty() {
        text.push_str("no verdict-producing stages\n");
    }
    Ok(ReportOutcome { text, passed })
}
