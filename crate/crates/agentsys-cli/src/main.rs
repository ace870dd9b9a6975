//! Operator entry point: run scenarios, execute suites across modes,
//! classify toolsets, and render metrics reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 suite completed with run
//! failures, 3 transport/config errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser)]
#[command(
    name = "agentsys",
    about = "Context-isolated agent runtime and attack-simulation harness"
)]
struct Cli {
    /// JSON config file; flags override environment, environment
    /// overrides the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunKnobs {
    /// Per-role policy selector, repeatable:
    /// main|worker|validator|sanitizer=scripted:<file>|project|susceptible:<p>:<inner>|remote:<url>
    #[arg(long = "policy", value_name = "ROLE=SELECTOR")]
    policies: Vec<String>,
    /// Sanitize-restart budget per subtask.
    #[arg(long)]
    budget: Option<u32>,
    /// Main-loop round cap.
    #[arg(long)]
    max_rounds: Option<u32>,
    /// Worker nesting depth cap.
    #[arg(long)]
    depth: Option<u32>,
    /// Reject return values failing strict schema conformance.
    #[arg(long)]
    strict: bool,
    /// Ablation preset: no-validator, no-sanitizer, isolation-only.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario: the benign arm plus one run per injection.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// baseline or isolated.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for RunRecord JSONL files.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        knobs: RunKnobs,
    },
    /// Run every scenario in a suite directory across modes and seeds.
    Bench {
        #[arg(long)]
        suite: PathBuf,
        /// both, baseline, or isolated.
        #[arg(long, default_value = "both")]
        modes: String,
        /// Number of seeds (0..n).
        #[arg(long)]
        seeds: Option<u64>,
        /// Metrics report file (.json or .csv).
        #[arg(long)]
        report: Option<PathBuf>,
        /// Directory for per-run RunRecord files.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        #[command(flatten)]
        knobs: RunKnobs,
    },
    /// Label a toolset as command/query and emit the taxonomy as JSON.
    Classify {
        /// JSON file holding a list of tool definitions.
        #[arg(long)]
        tools: PathBuf,
        /// Optional classifier backend selector for opaque tools.
        #[arg(long)]
        classifier: Option<String>,
    },
    /// Aggregate persisted run records into a metrics report.
    Report {
        /// Directory of RunRecord JSONL files.
        #[arg(long = "in")]
        input: PathBuf,
        /// json, csv, or md.
        #[arg(long, default_value = "json")]
        format: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, everything else is a
            // usage error (exit 1 per the interface contract)
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let code = match commands::dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            3
        }
    };
    ExitCode::from(code)
}
