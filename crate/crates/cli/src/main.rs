use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use metacl::experiment::{self, exit_code, render_summary};

/// Meta-learned continual learning experiments.
#[derive(Parser)]
#[command(name = "metacl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config file.
    Run {
        config: PathBuf,
        /// Override the output directory from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print final accuracies (mean ± std over seeds) of a run directory.
    Summarize { dir: PathBuf },
    /// List the records stored in a checkpoint file.
    InspectCheckpoint { file: PathBuf },
}

fn run(cli: Cli) -> metacl::Result<()> {
    match cli.command {
        Command::Run { config, output_dir } => {
            let mut cfg = experiment::ExperimentConfig::from_file(&config)?;
            if output_dir.is_some() {
                cfg.output_dir = output_dir;
            }
            let cfg = cfg.resolve()?;
            let summary = experiment::run_config(&cfg, |msg| eprintln!("{msg}"))?;
            print!("{}", render_summary(&summary));
            println!("artifacts in {}", cfg.output_dir().display());
        }
        Command::Summarize { dir } => print!("{}", render_summary(&experiment::summarize(dir)?)),
        Command::InspectCheckpoint { file } => print!("{}", experiment::inspect_checkpoint(file)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
