use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use incdyn_core::harness::{self, ExperimentConfig, HarnessError, RunStatus};
use log::info;

/// Simulate and cross-check incremental learning in deep linear models.
#[derive(Debug, Parser)]
#[command(name = "incdyn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Directory under which run directories are created when the
        /// config has no `output_dir`.
        #[arg(long, env = "INCDYN_OUTPUT_ROOT", default_value = "runs")]
        output_root: PathBuf,
    },
    /// Summarize the runs stored under a directory, verifying checksums.
    List { dir: PathBuf },
    /// Parse and check a config without running it.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Run { config, output_root } => {
            let parsed = ExperimentConfig::from_path(&config)?;
            info!("running {} (seed {}, config {})", parsed.kind, parsed.seed, &parsed.hash()[..12]);
            let report = harness::run(&parsed, &output_root)?;
            println!("{}", report.output_dir.display());
            for f in &report.manifest.files {
                info!("wrote {} ({} bytes)", f.path, f.bytes);
            }
        }
        Command::List { dir } => {
            for run in harness::list_experiments(&dir)? {
                let status = match &run.status {
                    RunStatus::Complete => "complete".to_string(),
                    RunStatus::Tampered { files } => format!("tampered ({})", files.join(", ")),
                    RunStatus::Corrupt { reason } => format!("corrupt ({reason})"),
                };
                let hash = run.config_hash.as_deref().map_or("-", |h| &h[..h.len().min(12)]);
                let kind = run.kind.as_deref().unwrap_or("-");
                println!("{}\t{kind}\t{hash}\t{status}", run.path.display());
            }
        }
        Command::Validate { config } => {
            let parsed = ExperimentConfig::from_path(&config)?;
            println!("ok: {} config, hash {}", parsed.kind, parsed.hash());
        }
    }
    Ok(())
}
