//! `star`: synthesize activation clips, train, evaluate and benchmark.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "star", version, about = "Spatio-temporal activation reprojection for action recognition")]
struct Cli {
    /// Directory every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// `key = value` config file, applied before command-line overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic dataset and its manifest.
    Synth {
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train on the training subjects and save a checkpoint.
    Train {
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on full-length clips.
    Eval {
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Time inference forward passes.
    Bench {
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print a clip's header and value statistics.
    Inspect {
        clip: PathBuf,
        /// Write one PGM per frame into this directory.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Print the resolved config without running anything.
    Config {
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn resolve(cli: &Cli, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let path = cli.workdir.join(path);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_file(&text)?;
    }
    if let Ok(seed) = std::env::var("STAR_SEED") {
        cfg.set("seed", seed.trim())
            .map_err(|e| CliError::Usage(format!("STAR_SEED: {e}")))?;
    }
    cfg.apply_overrides(overrides)?;
    eprint!("# resolved config\n{}", cfg.render());
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let dir = &cli.workdir;
    match &cli.command {
        Command::Synth { overrides } => commands::synth(dir, &resolve(cli, overrides)?),
        Command::Train { overrides } => commands::train(dir, &resolve(cli, overrides)?),
        Command::Eval { overrides } => commands::eval(dir, &resolve(cli, overrides)?),
        Command::Bench { overrides } => commands::bench(dir, &resolve(cli, overrides)?),
        Command::Inspect { clip, dump } => commands::inspect(&dir.join(clip), dump.as_ref().map(|d| dir.join(d))),
        Command::Config { overrides } => {
            print!("{}", resolve(cli, overrides)?.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("star: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
