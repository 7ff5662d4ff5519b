use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rfalcf_cli::config::{Algorithm, ExperimentConfig, Protocol};
use rfalcf_cli::experiment::{self, RunOptions};
use rfalcf_cli::{CliError, CliResult};

/// Concept factorization experiments driven by a TOML config.
#[derive(Debug, Parser)]
#[command(name = "rfalcf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Single base seed, overriding the config's seed list.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    jobs: usize,
    /// Run only this algorithm (rfa_lcf, cf, lccf, lcf).
    #[arg(long, global = true, value_name = "NAME")]
    algo: Option<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Single fit, or a category sweep when the config asks for one.
    Fit,
    /// Noise sweep, or a category sweep when the config asks for one.
    Sweep,
    /// Hyperparameter grid search.
    Grid,
    /// Compare k-NN weights with the learned graph.
    Weights,
}

fn protocol_for(cmd: Command, configured: Protocol) -> Protocol {
    match cmd {
        Command::Fit if matches!(configured, Protocol::SingleFit | Protocol::CategorySweep) => configured,
        Command::Fit => Protocol::SingleFit,
        Command::Sweep if matches!(configured, Protocol::CategorySweep | Protocol::NoiseSweep) => configured,
        Command::Sweep => Protocol::NoiseSweep,
        Command::Grid => Protocol::GridSearch,
        Command::Weights => Protocol::WeightCompare,
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::from_path(path)?;
    cfg.protocol = protocol_for(cli.command, cfg.protocol);
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(name) = &cli.algo {
        cfg.algorithms = vec![Algorithm::parse(name)?];
    }
    if cli.jobs == 0 {
        return Err(CliError::Usage("--jobs must be >= 1".into()));
    }
    let opts = RunOptions {
        jobs: cli.jobs,
        base_dir: path.parent().map(PathBuf::from).unwrap_or_default(),
        write_files: true,
    };
    let record = experiment::run_experiment(&cfg, &opts)?;
    for a in &record.aggregates {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut group = format!("K={}", a.k);
        if let Some(v) = a.variance {
            group.push_str(&format!(" var={v}"));
        }
        if let Some(c) = &a.cell {
            group.push_str(&format!(" {c}"));
        }
        println!(
            "{:8} {group:40} AC {}±{} (best {})  F {}±{}  [{} ok, {} failed]",
            a.algorithm.name(),
            fmt(a.ac_mean),
            fmt(a.ac_std),
            fmt(a.ac_max),
            fmt(a.f_mean),
            fmt(a.f_std),
            a.n_ok,
            a.n_failed
        );
    }
    for w in &record.weights {
        println!("seed {} {:9} {:10} error {:.6}", w.base_seed, w.copy, w.method, w.error);
    }
    println!("results written to {}", cfg.output_dir.display());
    record.outcome.check()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
