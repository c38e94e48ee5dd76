//! Experiment runner: synthesize reference fields, fit hyperparameters,
//! build conditional models, propagate uncertainty, compare the two
//! constructions, and run acquisition campaigns, all from declarative TOML
//! configs with fully seeded randomness.

mod commands;
mod config;
mod output;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use config::ExperimentConfig;
use output::OutDir;
use pipeline::Pipeline;

#[derive(Parser)]
#[command(
    name = "condkl",
    about = "Conditional KL models for a log-normal diffusion coefficient: \
             synthesis, conditioning, propagation and active learning"
)]
struct Cli {
    /// Path to a TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Name of a shipped preset (paper-sigma065, paper-sigma13).
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Output directory (overrides the CONDKL_OUT environment variable and
    /// the config's output.directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (affects speed only, never results).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the synthetic reference field and observation set.
    Synth,
    /// Estimate kernel hyperparameters by maximum likelihood.
    Fit,
    /// Build the conditional model(s) and write them to disk.
    Condition,
    /// Propagate the conditional model through the diffusion solve.
    Propagate,
    /// Compare the two conditional constructions at equal dimension.
    Compare,
    /// Run the active-learning acquisition campaign(s).
    Learn,
}

#[derive(Serialize)]
struct CliError {
    error: String,
    stage: String,
}

fn fail(stage: &str, err: anyhow::Error) -> ExitCode {
    let payload = CliError { error: format!("{err:#}"), stage: stage.to_string() };
    eprintln!("{}", serde_json::to_string(&payload).unwrap_or_else(|_| format!("{err:#}")));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    // Deterministic BLAS regardless of machine; outer parallelism is rayon.
    std::env::set_var("OPENBLAS_NUM_THREADS", "1");

    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_err()
        {
            return fail("init", anyhow::anyhow!("thread pool already initialized"));
        }
    }

    let config = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => return fail("config", e),
    };

    let stage = match cli.command {
        Command::Synth => "synth",
        Command::Fit => "fit",
        Command::Condition => "condition",
        Command::Propagate => "propagate",
        Command::Compare => "compare",
        Command::Learn => "learn",
    };

    match run(&cli, config, stage) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(stage, e),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match (&cli.config, &cli.preset) {
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (Some(_), Some(_)) => bail!("--config and --preset are mutually exclusive"),
        (None, None) => bail!("one of --config or --preset is required"),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn output_dir(cli: &Cli, config: &ExperimentConfig) -> Result<PathBuf> {
    if let Some(out) = &cli.out {
        return Ok(out.clone());
    }
    if let Ok(env) = std::env::var("CONDKL_OUT") {
        if !env.is_empty() {
            return Ok(PathBuf::from(env));
        }
    }
    if let Some(dir) = &config.output.directory {
        return Ok(PathBuf::from(dir));
    }
    bail!("no output directory: pass --out, set CONDKL_OUT, or set output.directory")
}

fn run(cli: &Cli, config: ExperimentConfig, stage: &str) -> Result<()> {
    let out_path = output_dir(cli, &config)?;
    let out = OutDir::create(&out_path, config.sha256(), config.seed)?;
    let pipeline = Pipeline::new(config)?;
    match stage {
        "synth" => commands::cmd_synth(&pipeline, &out),
        "fit" => commands::cmd_fit(&pipeline, &out),
        "condition" => commands::cmd_condition(&pipeline, &out),
        "propagate" => commands::cmd_propagate(&pipeline, &out),
        "compare" => commands::cmd_compare(&pipeline, &out),
        "learn" => commands::cmd_learn(&pipeline, &out),
        _ => unreachable!(),
    }
}
