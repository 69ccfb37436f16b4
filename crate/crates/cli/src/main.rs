use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spn_bloch_cli::{run, CliError, Command, RunConfig};

/// Bloch-spectral analysis of the linearized Schrödinger–Poisson–Newton crystal.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output.dir`; not part of the config hash.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Seed for random probes, overriding `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Jellium and Wiener conditions of the ion density.
    Check,
    /// Band surface, flat bands and growth law over the grid.
    Bands,
    /// Dispersive decay of band-localized initial data.
    Evolve,
    /// Spectral density and weighted resolvent norms as epsilon shrinks.
    Resolvent,
}

fn execute(cli: &Cli) -> Result<spn_bloch_cli::Outcome, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(k) = cli.workers {
        if k == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let command = match cli.command {
        Cmd::Check => Command::Check,
        Cmd::Bands => Command::Bands,
        Cmd::Evolve => Command::Evolve,
        Cmd::Resolvent => Command::Resolvent,
    };
    run(command, &cfg, cli.out.as_deref())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            ExitCode::from(if outcome.passed { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
