use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ddnn::{Error, Result};
use ddnn_cli::commands::{self, InferTarget, SweepKind};
use ddnn_cli::{exit_code, RunConfig};

/// Train and simulate distributed multi-exit networks over end devices and a cloud.
#[derive(Parser, Debug)]
#[command(name = "ddnn", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// INI run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, splits, initialization and shuffling
    /// [env: DDNN_SEED, otherwise the config value].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sweep cells evaluated concurrently.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Local exit threshold on normalized entropy, in [0, 1].
    #[arg(long, global = true)]
    threshold: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-view dataset directory.
    GenData,
    /// Train a DDNN; writes the checkpoint and the per-epoch history.
    Train,
    /// Classify samples with a checkpoint; writes per-sample traces.
    Infer {
        /// Checkpoint to load (overrides output.checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory to classify instead of the configured test split.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Classify only this sample id.
        #[arg(long)]
        sample: Option<String>,
    },
    /// Run one experiment sweep: aggregation, threshold, devices, filters or fault.
    Sweep {
        kind: String,
        /// Checkpoint for the threshold and fault sweeps.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var("DDNN_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidArgument(format!("DDNN_SEED={:?} is not an unsigned integer", v))),
        Err(_) => Ok(None),
    }
}

fn resolve(common: &Common, checkpoint: Option<&PathBuf>) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed.or(seed_from_env()?) {
        config.run.seed = seed;
    }
    let overrides = [
        ("out", "output", "dir", common.out.as_ref().map(|p| p.display().to_string())),
        ("jobs", "run", "jobs", common.jobs.map(|j| j.to_string())),
        ("threshold", "policy", "threshold", common.threshold.map(|t| t.to_string())),
    ];
    for (flag, section, key, value) in overrides {
        if let Some(value) = value {
            config
                .set(section, key, &value)
                .map_err(|m| Error::InvalidArgument(format!("--{}: {}", flag, m)))?;
        }
    }
    if let Some(path) = checkpoint {
        config.output.checkpoint = path.display().to_string();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match &cli.command {
        Command::GenData => {
            commands::gen_data(&resolve(&cli.common, None)?, &mut stdout)?;
        }
        Command::Train => {
            commands::train(&resolve(&cli.common, None)?, &mut stdout)?;
        }
        Command::Infer {
            checkpoint,
            data,
            sample,
        } => {
            let config = resolve(&cli.common, checkpoint.as_ref())?;
            let target = data.clone().map_or(InferTarget::TestSplit, InferTarget::Directory);
            commands::infer(&config, &target, sample.as_deref(), &mut stdout)?;
        }
        Command::Sweep { kind, checkpoint } => {
            let kind: SweepKind = kind.parse()?;
            commands::sweep(kind, &resolve(&cli.common, checkpoint.as_ref())?, &mut stdout)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors share the validation exit code; 2 is reserved
            // for failed internal checks
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
