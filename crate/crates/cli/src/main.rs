use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use fuel_core::scenario::{self, to_json, Format, RunOutcome, ScenarioConfig};
use fuel_core::Result;

/// Finite-fuel investment experiments driven by JSON scenario files.
#[derive(Debug, Parser)]
#[command(name = "fuel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct RunArgs {
    /// Scenario config (JSON, unknown keys rejected).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `mc.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; falls back to FUEL_DEFAULT_THREADS, then all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `outputs.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate shock, fuel and the closed-form policy.
    Simulate(RunArgs),
    /// Check the Kuhn-Tucker conditions of the closed-form plan.
    VerifyKkt(RunArgs),
    /// Solve the lattice dynamic program.
    SolveDp(RunArgs),
    /// Calibrate the tracking offset by Monte Carlo.
    CalibrateC(RunArgs),
    /// Oracle gap between the dynamic program and the closed-form policy.
    Compare(RunArgs),
}

impl Command {
    fn parts(&self) -> (&'static str, &RunArgs) {
        match self {
            Command::Simulate(a) => ("simulate", a),
            Command::VerifyKkt(a) => ("verify-kkt", a),
            Command::SolveDp(a) => ("solve-dp", a),
            Command::CalibrateC(a) => ("calibrate-c", a),
            Command::Compare(a) => ("compare", a),
        }
    }
}

fn thread_count(flag: Option<usize>) -> std::result::Result<Option<usize>, String> {
    if let Some(n) = flag {
        return if n == 0 { Err("--threads: must be positive".into()) } else { Ok(Some(n)) };
    }
    match std::env::var("FUEL_DEFAULT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("FUEL_DEFAULT_THREADS: expected a positive integer, got {v:?}")),
        },
        Err(_) => Ok(None),
    }
}

fn run(name: &str, cfg: &ScenarioConfig) -> Result<RunOutcome> {
    match name {
        "simulate" => scenario::simulate(cfg),
        "verify-kkt" => scenario::verify_kkt(cfg),
        "solve-dp" => scenario::solve_dp(cfg),
        "calibrate-c" => scenario::calibrate_c(cfg),
        _ => scenario::compare(cfg),
    }
}

fn metadata(name: &str, args: &RunArgs, cfg: &ScenarioConfig, threads: usize, files: &[PathBuf]) -> Result<Vec<u8>> {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let names: Vec<String> =
        files.iter().filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned())).collect();
    to_json(&serde_json::json!({
        "command": name,
        "config": args.config.display().to_string(),
        "seed": cfg.mc.seed,
        "threads": threads,
        "unix_time": now,
        "version": env!("CARGO_PKG_VERSION"),
        "files": names,
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = cli.command.parts();
    let threads = match thread_count(args.threads) {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(name, args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{name}: verdict failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(name: &str, args: &RunArgs) -> Result<bool> {
    let mut cfg = scenario::load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.mc.seed = seed;
    }
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.outputs.directory));
    let outcome = run(name, &cfg)?;
    let files = outcome.write(&dir, &cfg.outputs.formats)?;
    for f in &files {
        println!("{}", f.display());
    }
    if cfg.outputs.formats.contains(&Format::Json) {
        let meta = metadata(name, args, &cfg, rayon::current_num_threads(), &files)?;
        std::fs::write(dir.join("run_metadata.json"), meta)?;
    }
    Ok(outcome.verdict)
}
