//! `scl`: run scenarios, check parameters, solve regulators, query the oracle.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use rayon::prelude::*;

use scl_core::artifacts::{regulator_entries, to_json_string, write_run, OracleReport};
use scl_core::scenario::{load, ScenarioConfig};
use scl_core::simulator::{centralized_oracle, feasibility, prepare, run, ORACLE_TOL};
use scl_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_SAFETY: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_TRANSMISSION_ZERO: u8 = 4;
const EXIT_ORACLE: u8 = 5;
const EXIT_UNCERTIFIED: u8 = 6;

#[derive(Parser)]
#[command(name = "scl", version, about = "Safe distributed optimal output consensus simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesis, feasibility, integration, safety report and metrics.
    Simulate(SimulateArgs),
    /// Print the parameter feasibility report without simulating.
    CheckParams(ConfigArg),
    /// Print regulator solutions and residuals per agent.
    SolveRegulator(ConfigArg),
    /// Print the centralized constrained optimum.
    Oracle(ConfigArg),
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, required_unless_present = "batch", conflicts_with = "batch")]
    config: Option<PathBuf>,
    /// Run every `*.json` in this directory concurrently.
    #[arg(long)]
    batch: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides `integration.step`.
    #[arg(long)]
    step: Option<f64>,
    /// Overrides `integration.horizon`.
    #[arg(long)]
    horizon: Option<f64>,
    /// Fail when the parameters are not certified.
    #[arg(long)]
    strict_certify: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::UnsafeInitialCondition { .. } => EXIT_SAFETY,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::TransmissionZero { .. } => EXIT_TRANSMISSION_ZERO,
        Error::NonConvergence { .. } => EXIT_ORACLE,
        _ => EXIT_CONFIG,
    }
}

fn fail(context: &str, e: &Error) -> u8 {
    error!("{context}: {e}");
    eprintln!("error: {context}: {e}");
    exit_code(e)
}

fn simulate_one(path: &Path, out: &Path, args: &SimulateArgs) -> u8 {
    let label = path.display().to_string();
    let mut loaded = match load(path) {
        Ok(l) => l,
        Err(e) => return fail(&label, &e),
    };
    if let Some(h) = args.step {
        loaded.scenario.integration.step = h;
    }
    if let Some(t) = args.horizon {
        loaded.scenario.integration.horizon = t;
    }
    if let Err(e) = loaded.scenario.validate() {
        return fail(&label, &e);
    }
    let output = match run(loaded.scenario) {
        Ok(o) => o,
        Err(e) => return fail(&label, &e),
    };
    let artifacts = match write_run(&output, &loaded.hash, out) {
        Ok(a) => a,
        Err(e) => return fail(&label, &e),
    };
    info!("{label}: artifacts in {}", out.display());
    println!(
        "{label}: final_gap {:.6e}, min_margin {:.6e}, certified {}, summary {}",
        output.metrics.final_gap,
        output.metrics.min_margin,
        output.certified().map_or("n/a".to_string(), |c| c.to_string()),
        artifacts.summary_path.display()
    );
    if let Some(t) = output.safety.first_violation_t {
        let agent = output.safety.first_violation_agent.map_or(0, |a| a + 1);
        eprintln!("error: {label}: safety violation at t = {t:.6} (agent {agent})");
        return EXIT_SAFETY;
    }
    if args.strict_certify && output.certified() == Some(false) {
        let failing: Vec<&str> = output
            .feasibility
            .iter()
            .flat_map(|r| r.checks.iter().filter(|c| !c.passed).map(|c| c.name))
            .collect();
        eprintln!("error: {label}: parameters not certified; failing: {}", failing.join(", "));
        return EXIT_UNCERTIFIED;
    }
    0
}

fn simulate(args: &SimulateArgs) -> u8 {
    let Some(dir) = &args.batch else {
        return simulate_one(args.config.as_deref().expect("clap requires --config"), &args.out, args);
    };
    let mut configs: Vec<PathBuf> = match std::fs::read_dir(dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(e) => return fail(&dir.display().to_string(), &Error::Io(e)),
    };
    configs.sort();
    if configs.is_empty() {
        eprintln!("error: no scenario files in {}", dir.display());
        return EXIT_CONFIG;
    }
    configs
        .par_iter()
        .map(|p| {
            let stem = p.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
            simulate_one(p, &args.out.join(stem), args)
        })
        .collect::<Vec<u8>>()
        .into_iter()
        .max()
        .unwrap_or(0)
}

fn print_json<T: serde::Serialize>(value: &T) -> u8 {
    match to_json_string(value) {
        Ok(s) => {
            print!("{s}");
            0
        }
        Err(e) => fail("serialization", &e),
    }
}

fn check_params(path: &Path) -> u8 {
    let label = path.display().to_string();
    let report = load(path)
        .and_then(|l| prepare(l.scenario))
        .and_then(|p| feasibility(&p));
    match report {
        Ok(Some(r)) => print_json(&r),
        Ok(None) => fail(&label, &Error::Config("check-params needs a closed-loop scenario".into())),
        Err(e) => fail(&label, &e),
    }
}

fn solve_regulator(path: &Path) -> u8 {
    let label = path.display().to_string();
    let entries = ScenarioConfig::from_path(path)
        .and_then(|c| c.agents())
        .and_then(|(agents, _)| regulator_entries(&agents));
    match entries {
        Ok(e) => print_json(&e),
        Err(e) => fail(&label, &e),
    }
}

fn oracle(path: &Path) -> u8 {
    let label = path.display().to_string();
    let result = ScenarioConfig::from_path(path).and_then(|c| {
        let omega = c.constraint.build()?;
        centralized_oracle(&c.objectives()?, &omega, ORACLE_TOL)
    });
    match result {
        Ok(o) => print_json(&OracleReport::from(&o)),
        Err(e) => fail(&label, &e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("SCL_LOG", "warn")).init();
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Simulate(args) => simulate(args),
        Command::CheckParams(a) => check_params(&a.config),
        Command::SolveRegulator(a) => solve_regulator(&a.config),
        Command::Oracle(a) => oracle(&a.config),
    };
    ExitCode::from(code)
}
