//! Experiment runner around `simreuse-core`: reads a TOML run config,
//! writes CSV and JSON result files.

pub mod commands;
pub mod config;
pub mod mrcy;
pub mod output;
pub mod synth;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use simreuse_core::dataflow::Dataflow;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "simreuse", version, about = "Signature-based computation reuse experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for result files.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub dataflow: Option<DataflowArg>,
    /// Asynchronous row-stationary design.
    #[arg(long = "async", global = true)]
    pub asynchronous: bool,
    /// Turn similarity detection off.
    #[arg(long, global = true)]
    pub no_reuse: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Unique signature groups of RPQ and a Bloom filter over signature lengths.
    RpqExperiment,
    /// Cycle model over layers, duplicate fractions and cache organisations.
    Simulate,
    /// Train the baseline and reuse arms and compare them.
    Train,
    /// Aggregate speedups of simulate/train JSON outputs.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DataflowArg {
    Rs,
    Ws,
    Is,
}

impl From<DataflowArg> for Dataflow {
    fn from(d: DataflowArg) -> Self {
        match d {
            DataflowArg::Rs => Dataflow::Rs,
            DataflowArg::Ws => Dataflow::Ws,
            DataflowArg::Is => Dataflow::Is,
        }
    }
}

/// Config after command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.dataflow {
        cfg.simulate.dataflow = d.into();
        cfg.train.options.dataflow = d.into();
    }
    if cli.asynchronous {
        cfg.simulate.asynchronous = true;
        cfg.train.options.asynchronous = true;
    }
    if cli.no_reuse {
        cfg.simulate.reuse = false;
        cfg.train.options.force_detection_off = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the command; returns the files written.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = resolve_config(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
        .context("building the worker pool")?;
    pool.install(|| match &cli.command {
        Command::RpqExperiment => commands::rpq_experiment(&cfg, &cli.out),
        Command::Simulate => commands::simulate(&cfg, &cli.out),
        Command::Train => commands::train(&cfg, &cli.out),
        Command::Report { inputs } => commands::report(&cfg, inputs, &cli.out),
    })
}
