use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wignerflow::config::{apply_overrides, parse_config, ScenarioConfig};
use wignerflow::error::CoreError;
use wignerflow::scenario::run_scenario;

/// Lindblad dynamics, Petz reversal, and their phase-space reduction to
/// forward and reverse diffusion: scenario runner.
#[derive(Parser)]
#[command(name = "wignerflow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Scenario configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the ensemble seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: out/<scenario>-<pipeline>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Config override as section.key=value; repeatable.
    #[arg(long = "override", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the forward Lindblad equation and export Wigner fields.
    ForwardLindblad,
    /// Run the Petz reversal recovery study.
    PetzReverse,
    /// Integrate the classical Fokker-Planck equation.
    FokkerPlanck,
    /// Forward-then-reverse diffusion round trips (PDE and ensemble).
    ReverseSde,
    /// Semiclassical residual sweep over a list of hbar values.
    HbarSweep,
    /// Run all four reversal/reduction arrows and tabulate closure metrics.
    CorrespondenceReport,
    /// Parse and validate the configuration, then exit.
    ValidateConfig,
}

impl Command {
    fn pipeline(&self) -> &'static str {
        match self {
            Command::ForwardLindblad => "forward-lindblad",
            Command::PetzReverse => "petz-reverse",
            Command::FokkerPlanck => "fokker-planck",
            Command::ReverseSde => "reverse-sde",
            Command::HbarSweep => "hbar-sweep",
            Command::CorrespondenceReport => "correspondence-report",
            Command::ValidateConfig => "validate-config",
        }
    }
}

const EXIT_OK: u8 = 0;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_THRESHOLD: u8 = 4;

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Config(_) => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

fn run() -> Result<u8, (u8, String)> {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| (EXIT_CONFIG, format!("thread pool: {e}")))?;
    }

    let mut config = match &cli.config {
        Some(path) => parse_config(path).map_err(|e| (exit_code_for(&e), e.to_string()))?,
        None => ScenarioConfig::default(),
    };
    config = apply_overrides(&config, &cli.overrides)
        .map_err(|e| (exit_code_for(&e), e.to_string()))?;
    if let Some(seed) = cli.seed {
        config.ensemble.seed = seed;
    }
    config.pipeline = cli.command.pipeline().to_string();

    if matches!(cli.command, Command::ValidateConfig) && cli.out.is_none() {
        config.validate().map_err(|e| (exit_code_for(&e), e.to_string()))?;
        println!("configuration valid:\n{}", config.to_toml());
        return Ok(EXIT_OK);
    }

    let out_dir = cli.out.unwrap_or_else(|| {
        PathBuf::from("out").join(format!("{}-{}", config.scenario, config.pipeline))
    });
    let manifest =
        run_scenario(&config, &out_dir).map_err(|e| (exit_code_for(&e), e.to_string()))?;

    for metric in &manifest.metrics {
        println!(
            "[{}] {} = {:.6e} ({})",
            if metric.pass { "pass" } else { "FAIL" },
            metric.name,
            metric.value,
            metric.threshold
        );
    }
    println!("manifest: {}", out_dir.join("manifest.json").display());

    match manifest.status.as_str() {
        "ok" => Ok(EXIT_OK),
        "threshold-failure" => Err((EXIT_THRESHOLD, "one or more metrics out of bounds".into())),
        _ => Err((
            EXIT_NUMERICAL,
            manifest.error.unwrap_or_else(|| "numerical failure".into()),
        )),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => ExitCode::from(code),
        Err((code, message)) => {
            eprintln!("error: {message}");
            ExitCode::from(code)
        }
    }
}
