use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::commands::{self, SearchArgs, TrainArgs};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "dcss", version, about = "Densely connected architecture search at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Materialize the synthetic dataset splits and their manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Search the supernet, checkpointing after every epoch.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory from `gen-data`; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue the run already in `--out`.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs of this invocation.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Discretize a supernet checkpoint into an architecture JSON.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip the fallback edge for nodes without a non-negative beta.
        #[arg(long)]
        strict: bool,
        /// Also write a Graphviz file next to `--out`.
        #[arg(long)]
        dot: bool,
    },
    /// Retrain a decoded architecture.
    Train {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run configuration; defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Supernet checkpoint to inherit weights from (`train.init = inherit`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Repeat search and retraining over several seeds and correlate the results.
    Correlate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Trials run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        force: bool,
    },
    /// Print a correlation report as a table.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn out_dir(cfg: &RunConfig, out: Option<PathBuf>) -> CliResult<PathBuf> {
    out.or_else(|| cfg.io.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::Config("no --out given and io.output_dir is unset".into()))
}

fn load_or_default(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_seed_override(std::env::var(crate::config::SEED_ENV).ok().as_deref())?;
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { config, out, force } => {
            let cfg = RunConfig::load(&config)?;
            let out = out_dir(&cfg, out)?;
            commands::gen_data(&cfg, &out, force)
        }
        Command::Search { config, data, out, resume, stop_after, force } => {
            let cfg = RunConfig::load(&config)?;
            let out = out_dir(&cfg, out)?;
            commands::search(&cfg, SearchArgs { data: data.as_deref(), out: &out, resume, stop_after, force })
        }
        Command::Decode { checkpoint, out, strict, dot } => {
            commands::decode_checkpoint(&checkpoint, &out, strict, dot).map(|_| ())
        }
        Command::Train { arch, data, out, config, checkpoint, force } => {
            let cfg = load_or_default(config.as_deref())?;
            let out = out_dir(&cfg, out)?;
            let args = TrainArgs { arch: &arch, data: data.as_deref(), out: &out, checkpoint: checkpoint.as_deref(), force };
            let t = commands::train(&cfg, args)?;
            println!("T-mIoU {t:.4}");
            Ok(())
        }
        Command::Correlate { config, out, data, jobs, force } => {
            let cfg = RunConfig::load(&config)?;
            let out = out_dir(&cfg, out)?;
            let report = commands::correlate(&cfg, &out, data.as_deref(), jobs, force)?;
            print!("{}", commands::render_report(&report));
            Ok(())
        }
        Command::Report { input } => {
            print!("{}", commands::report(&input)?);
            Ok(())
        }
    }
}
