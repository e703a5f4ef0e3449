use std::path::PathBuf;
use std::process::ExitCode;

use bdlab_core::harness::{
    compare_reports, evaluate_checkpoint, grid_from_checkpoint, load_checkpoint, load_report, run_experiment,
    ExperimentConfig, GridMode, HarnessError,
};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "backdoor-lab", version, about = "Backdoor attacks against autoencoders and GANs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the experiment described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split named by a config file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Render a sample grid from a checkpoint.
    Grid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "clean")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Utility deltas between a clean and a backdoored run.
    Compare {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        backdoored: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Clean,
    Triggered,
}

fn print_json(value: &impl serde::Serialize) -> Result<(), HarnessError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let outcome = run_experiment(&cfg)?;
            log::info!(
                "finished in {:.1}s, outputs in {}",
                outcome.timing.wall_clock_seconds,
                outcome.out_dir.display()
            );
            print_json(&outcome.report.metrics)
        }
        Command::Eval { checkpoint, config } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let cfg = ExperimentConfig::load(&config)?;
            print_json(&evaluate_checkpoint(&ckpt, &cfg)?)
        }
        Command::Grid { checkpoint, mode, out } => {
            let mode = match mode {
                Mode::Clean => GridMode::Clean,
                Mode::Triggered => GridMode::Triggered,
            };
            grid_from_checkpoint(&load_checkpoint(&checkpoint)?, mode, &out)
        }
        Command::Compare { clean, backdoored } => {
            print_json(&compare_reports(&load_report(&clean)?, &load_report(&backdoored)?)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
