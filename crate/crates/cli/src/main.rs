use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

mod commands;
mod config;

use commands::{config_err, ConfigError, Output};
use config::{Flags, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "dplda", version, about = "Differentially private LDA training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Clone, PartialEq, Eq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Command {
    /// Load a corpus, split it and write the splits as UCI files.
    Ingest,
    /// Train a model with any variant.
    Train,
    /// Produce perturbed client batches from a corpus.
    Perturb,
    /// Rebuild token corpora from perturbed batches.
    Reconstruct,
    /// Run the online pipeline over perturbed batches.
    Online,
    /// Run the topic-based inference attack.
    Attack,
    /// Held-out perplexity of a saved model.
    Eval,
    /// Run an experiment plan.
    Sweep,
    /// Re-run the command recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    command: Command,
    version: String,
    seed: u64,
    config: RunConfig,
    outputs: Vec<String>,
    wall_time_ms: u128,
}

fn execute(command: Command, config: RunConfig) -> Result<()> {
    let started = Instant::now();
    let mut out = Output::new(&config)?;
    match command {
        Command::Ingest => commands::ingest(&config, &mut out)?,
        Command::Train => commands::train(&config, &mut out)?,
        Command::Perturb => commands::perturb(&config, &mut out)?,
        Command::Reconstruct => commands::reconstruct_cmd(&config, &mut out)?,
        Command::Online => commands::online(&config, &mut out)?,
        Command::Attack => commands::attack(&config, &mut out)?,
        Command::Eval => commands::eval(&config, &mut out)?,
        Command::Sweep => commands::sweep_cmd(&config, &mut out)?,
        Command::Replay { .. } => unreachable!("replay is resolved before execution"),
    }
    let config_path = out.dir().join("config.toml");
    std::fs::write(&config_path, config.to_toml())?;
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed(),
        config,
        outputs: out.files().to_vec(),
        wall_time_ms: started.elapsed().as_millis(),
    };
    let path = out.dir().join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Replay { manifest } => {
            let text = std::fs::read_to_string(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
            let mut recorded: Manifest =
                serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", manifest.display())))?;
            if let Some(out) = cli.flags.out {
                recorded.config.out = Some(out);
            }
            recorded.config.validate().map_err(config_err)?;
            execute(recorded.command, recorded.config)
        }
        command => {
            let config = RunConfig::resolve(&cli.flags).map_err(config_err)?;
            execute(command, config)
        }
    }
}

fn is_config_error(err: &anyhow::Error) -> bool {
    use dplda::corpus::CorpusError;
    err.chain().any(|cause| {
        cause.is::<ConfigError>()
            || cause.is::<dplda::privacy::PrivacyError>()
            || matches!(
                cause.downcast_ref::<dplda::Error>(),
                Some(dplda::Error::InvalidConfig(_) | dplda::Error::Privacy(_))
            )
            || matches!(
                cause.downcast_ref::<CorpusError>(),
                Some(CorpusError::Parameter(_) | CorpusError::SplitRange { .. })
            )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_config_error(&err) { 1 } else { 2 })
        }
    }
}
