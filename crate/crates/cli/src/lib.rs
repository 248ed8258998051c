//! Library behind the `vfd` binary: synthesize data, train the
//! disentanglement model, run episodic benchmarks, export augmented features
//! and analyze feature geometry.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use vfd_core::eval::SchemeKind;

use crate::commands::Context;
use crate::config::{Overrides, RunConfig};
pub use crate::error::CliError;

#[derive(Parser)]
#[command(name = "vfd", version, about = "Variational feature disentanglement for few-shot augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Evaluation threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    episodes: Option<usize>,
    #[arg(long, global = true)]
    way: Option<usize>,
    #[arg(long, global = true)]
    shot: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write base and novel feature files plus a manifest.
    Synth,
    /// Train on the base split; writes a checkpoint and a JSON-lines history.
    Train {
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Run episodic benchmarks for every configured scheme and classifier.
    Eval,
    /// Export support, augmented and real novel features as feature files.
    Augment {
        #[arg(long)]
        scheme: Option<SchemeKind>,
    },
    /// Geometry report for a feature file; with a second (real) file, also
    /// nearest-neighbor class retention.
    Analyze {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

/// Parses the process arguments, exiting with a usage message on bad input.
pub fn run_env() -> Result<(), CliError> {
    run(Cli::parse())
}

/// Parses `args` (program name first) and runs the selected command.
pub fn run_from<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) if e.use_stderr() => Err(CliError::new("usage", e.to_string())),
        Err(e) => {
            print!("{e}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let c = &cli.common;
    let ov = Overrides {
        seed: c.seed,
        epochs: c.epochs,
        episodes: c.episodes,
        way: c.way,
        shot: c.shot,
    };
    let mut config = RunConfig::load(c.config.as_deref(), &ov)?;
    if let Command::Augment { scheme: Some(s) } = &cli.command {
        config.analysis.scheme = *s;
    }
    let ctx = Context::new(config, c.out_dir.clone(), c.workers);
    match &cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Train { resume } => commands::train(&ctx, *resume),
        Command::Eval => commands::eval(&ctx),
        Command::Augment { .. } => commands::augment(&ctx),
        Command::Analyze { files } => commands::analyze(&ctx, files),
    }
}
