use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use splitguard_cli::{run, Command, RawConfig};

#[derive(Parser)]
#[command(name = "splitguard", version, about = "Train, attack and evaluate split-inference defenses")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(clap::Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `runs/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Sub {
    /// Two-phase training; writes loss curves and a checkpoint.
    Train(Common),
    /// Runs the configured attacks against the configured defense.
    Attack(Common),
    /// Utility and attack metrics across pruning ratios.
    Sweep(Common),
    /// Exact information checks on random discrete systems.
    Mi(Common),
    /// Writes weights and encoded samples as a benchmark container.
    Export(Common),
    /// Compares defenses, including a noise-level grid.
    Eval(Common),
}

fn main() -> ExitCode {
    match try_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn try_main() -> Result<()> {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Sub::Train(c) => (Command::Train, c),
        Sub::Attack(c) => (Command::Attack, c),
        Sub::Sweep(c) => (Command::Sweep, c),
        Sub::Mi(c) => (Command::Mi, c),
        Sub::Export(c) => (Command::Export, c),
        Sub::Eval(c) => (Command::Eval, c),
    };
    let mut raw = RawConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        raw.set("seed", seed.to_string())?;
    }
    let out = common
        .out
        .unwrap_or_else(|| PathBuf::from("runs").join(command.name()));
    let manifest = run(command, &raw, &out)?;
    for a in &manifest.artifacts {
        println!("{}  {}", a.sha256, out.join(&a.file).display());
    }
    Ok(())
}
