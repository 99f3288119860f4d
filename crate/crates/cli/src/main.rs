use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use popdyn::experiment::{self, ExperimentConfig, RunOptions};

/// Simulation, limit and fluctuation experiments for structured populations.
#[derive(Parser)]
#[command(name = "popdyn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage requested by a config and write its outputs.
    Run {
        config: PathBuf,
        /// Worker threads for replicate batches (does not change outputs).
        #[arg(long)]
        workers: Option<usize>,
        /// Output root; defaults to $POPDYN_OUTPUT_ROOT, then the working directory.
        #[arg(long)]
        output_root: Option<PathBuf>,
    },
    /// Report which model conditions are verified, probed or unverifiable.
    Validate {
        config: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Re-render the verdicts of a finished run.
    Report { dir: PathBuf },
}

fn fail(err: popdyn::Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(experiment::exit_code(&err) as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match cli.command {
        Command::Run {
            config,
            workers,
            output_root,
        } => {
            let mut opts = RunOptions::from_env();
            opts.workers = workers;
            if output_root.is_some() {
                opts.output_root = output_root;
            }
            match experiment::run(&config, &opts) {
                Ok(out) => {
                    for v in &out.manifest.verdicts {
                        println!("{} {}", if v.passed { "PASS" } else { "FAIL" }, v.stage);
                    }
                    println!("outputs in {}", out.dir.display());
                    ExitCode::from(if out.passed() { 0 } else { 1 })
                }
                Err(e) => fail(e),
            }
        }
        Command::Validate { config, json } => {
            let cfg = match ExperimentConfig::load(&config) {
                Ok((c, _)) => c,
                Err(e) => return fail(e),
            };
            let report = experiment::validate(&cfg);
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            } else {
                print!("{}", report.render());
            }
            if !report.hard_failures.is_empty() {
                ExitCode::from(2)
            } else if report.has_failures() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Command::Report { dir } => match experiment::report(&dir) {
            Ok(r) => {
                print!("{}", r.text);
                ExitCode::from(if r.passed { 0 } else { 1 })
            }
            Err(e) => fail(e),
        },
    }
}
