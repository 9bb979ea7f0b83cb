use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::{ConfigError, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "twostage",
    version,
    about = "Encoder and seq2seq pre-training recipes"
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a pre-training plan, writing traces and stage checkpoints.
    Pretrain,
    /// Fine-tune a checkpoint on a task for one or more seeds.
    Finetune,
    /// Score a fine-tuned checkpoint on held-out files.
    Evaluate,
    /// Compute-cost table for plans.
    Cost {
        /// All ten model-table plans at reference scale, with savings.
        #[arg(long)]
        table1: bool,
    },
    /// Build a vocabulary and pack a corpus into fixed-length sequences.
    Pack,
}

fn load(cli: &Cli) -> Result<ExperimentConfig, ConfigError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| ConfigError("--config: required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.out.is_some() {
        cfg.out.clone_from(&cli.out);
    }
    cfg.seed()?;
    cfg.out()?;
    Ok(cfg)
}

fn section<'a, T>(s: &'a mut Option<T>, name: &str) -> Result<&'a mut T, ConfigError> {
    s.as_mut()
        .ok_or_else(|| ConfigError(format!("[{name}]: missing section for this command")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Cost { table1: true } => {
            commands::cost(&commands::table1_plans()?, true, cli.out.as_deref())
        }
        Command::Cost { table1: false } => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| ConfigError("--config: required unless --table1 is given".into()))?;
            let mut cfg = ExperimentConfig::load(path)?;
            if cli.out.is_some() {
                cfg.out.clone_from(&cli.out);
            }
            let plans = section(&mut cfg.cost, "cost")?.resolve()?;
            commands::cost(&plans, false, cfg.out.as_deref())
        }
        Command::Pack => {
            let mut cfg = load(&cli)?;
            let mut job = section(&mut cfg.pack, "pack")?.clone();
            job.check()?;
            let out = cfg.out()?.to_path_buf();
            commands::pack(&cfg, &job, &out)
        }
        Command::Pretrain => {
            let mut cfg = load(&cli)?;
            let mut job = section(&mut cfg.pretrain, "pretrain")?.clone();
            let plan = job.check()?;
            let out = cfg.out()?.to_path_buf();
            commands::pretrain(&cfg, &job, &plan, &out)
        }
        Command::Finetune => {
            let mut cfg = load(&cli)?;
            let job = section(&mut cfg.finetune, "finetune")?.clone();
            let ft = job.check()?;
            let out = cfg.out()?.to_path_buf();
            commands::finetune_cmd(&cfg, &job, &ft, &out)
        }
        Command::Evaluate => {
            let mut cfg = load(&cli)?;
            let job = section(&mut cfg.evaluate, "evaluate")?.clone();
            let ft = job.check()?;
            let out = cfg.out()?.to_path_buf();
            commands::evaluate_cmd(&cfg, &job, &ft, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
