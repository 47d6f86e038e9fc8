//! `cgvar` command-line interface.

mod diagnose;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cgvar::{Preset, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cgvar", version, about = "Variational coarse-graining driven by energies and forces")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML, or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base settings the configuration file is layered over.
    #[arg(long, global = true)]
    preset: Option<Preset>,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the tempered optimization and writes checkpoints and traces.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draws ancestral samples from a checkpoint into `samples.csv`.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        n: usize,
    },
    /// Writes every diagnostic for a checkpoint; fails if a check fails.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Runs the reference chain and, where a grid exists, the quadrature oracle.
    Reference,
    /// Compares reparametrized gradients with finite differences on a small model.
    Gradcheck {
        /// Hidden width of the test model.
        #[arg(long, default_value_t = 4)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path, self.preset)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::preset(self.preset.unwrap_or_default()),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out = out.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CGVAR_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("CGVAR_THREADS must be a positive integer, got '{v}'"))?;
        anyhow::ensure!(n > 0, "CGVAR_THREADS must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    init_threads()?;
    let config = cli.common.resolve()?;
    match cli.command {
        Command::Train { resume } => run::train(&config, resume.as_deref()).map(|_| true),
        Command::Sample { checkpoint, n } => run::sample(&config, &checkpoint, n).map(|_| true),
        Command::Diagnose { checkpoint } => diagnose::diagnose(&config, &checkpoint),
        Command::Reference => run::reference(&config).map(|_| true),
        Command::Gradcheck { width, samples } => run::gradcheck(&config, width, samples),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
