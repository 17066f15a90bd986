//! Command-line front end: run scenario documents, validate them, list
//! the built-in presets.
//!
//! Exit codes: 0 when every experiment passes, 1 when any fails, 3 when
//! the worst outcome is insufficient statistical power, 2 for usage and
//! validation errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lqsep::scenario::{
    preset_document, run_scenario, Scenario, ScenarioReport, Verdict, PRESET_NAMES,
};
use lqsep::{Error, TimeGrid};

#[derive(Parser)]
#[command(
    name = "lqsep",
    version,
    about = "Closed-loop simulation and audit batteries for linear-quadratic stochastic control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario's experiments and write its report artifacts.
    Run {
        /// Scenario document path, or `preset:NAME` for a built-in.
        #[arg(long)]
        scenario: String,
        /// Override the Monte Carlo path count.
        #[arg(long)]
        paths: Option<usize>,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the number of grid steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse a scenario document and report every validation issue.
    Validate {
        /// Scenario document path, or `preset:NAME` for a built-in.
        #[arg(long)]
        scenario: String,
    },
    /// List the built-in scenario presets.
    ListPresets,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run {
            scenario,
            paths,
            seed,
            steps,
            out,
        } => {
            let scenario = load_scenario(&scenario, paths, seed, steps, out)?;
            let report = run_scenario(&scenario)?;
            print_report(&scenario, &report);
            Ok(match report.overall {
                Verdict::Pass => ExitCode::SUCCESS,
                Verdict::Fail => ExitCode::from(1),
                Verdict::InsufficientPower => ExitCode::from(3),
            })
        }
        Command::Validate { scenario } => {
            let scenario = load_scenario(&scenario, None, None, None, None)?;
            println!(
                "scenario `{}` is valid: {} experiments, {} steps, {} paths",
                scenario.name,
                scenario.experiments.len(),
                scenario.grid.steps(),
                scenario.paths
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::ListPresets => {
            for name in PRESET_NAMES {
                let doc = preset_document(name).expect("listed presets exist");
                let blurb: Vec<&str> = doc
                    .lines()
                    .take_while(|l| l.starts_with('#'))
                    .map(|l| l.trim_start_matches('#').trim())
                    .collect();
                println!("{name}: {}", blurb.join(" "));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Resolve `preset:NAME`, a bare preset name, or a document path.
fn load_document(arg: &str) -> Result<String, Error> {
    if let Some(name) = arg.strip_prefix("preset:") {
        return preset_document(name)
            .map(str::to_string)
            .ok_or_else(|| Error::InvalidArgument {
                arg: "--scenario",
                reason: format!(
                    "unknown preset `{name}` (available: {})",
                    PRESET_NAMES.join(", ")
                ),
            });
    }
    let path = Path::new(arg);
    if !path.exists() {
        if let Some(doc) = preset_document(arg) {
            return Ok(doc.to_string());
        }
    }
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: arg.to_string(),
        source: e,
    })
}

fn load_scenario(
    arg: &str,
    paths: Option<usize>,
    seed: Option<u64>,
    steps: Option<usize>,
    out: Option<PathBuf>,
) -> Result<Scenario, Error> {
    let text = load_document(arg)?;
    let mut scenario = Scenario::parse(&text)?;
    if let Some(p) = paths {
        scenario.paths = p;
    }
    if let Some(s) = seed {
        scenario.seed = s;
    }
    if let Some(n) = steps {
        scenario.grid = TimeGrid::new(scenario.grid.horizon(), n)?;
    }
    if let Some(dir) = out {
        scenario.out_dir = dir;
    }
    // Overrides can break consistency (e.g. steps no longer divisible by
    // the refinement factor), so the merged scenario is re-validated.
    scenario.validate()?;
    Ok(scenario)
}

fn print_report(scenario: &Scenario, report: &ScenarioReport) {
    println!(
        "scenario {}: law {}, {} steps, {} paths, seed {}",
        report.name, report.law, report.steps, report.paths, report.seed
    );
    for outcome in &report.experiments {
        let verdict = verdict_label(outcome.verdict);
        match &outcome.failure {
            Some(why) => println!("  {:<24} {verdict}: {why}", outcome.name),
            None => println!("  {:<24} {verdict}", outcome.name),
        }
    }
    println!("overall: {}", verdict_label(report.overall));
    println!("report: {}", scenario.out_dir.join("report.json").display());
    if report.overall == Verdict::Fail {
        println!("marker: {}", scenario.out_dir.join("FAILED").display());
    }
}

fn verdict_label(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::Fail => "FAIL",
        Verdict::InsufficientPower => "insufficient power",
    }
}
