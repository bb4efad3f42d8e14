//! Command-line pipeline: synthesize or ingest a cohort, fit dynamics and a
//! behavior clone, train a policy in the learned model and evaluate blends
//! off-policy.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::stages::{run_stage, RunContext, Stage, StageOutcome, Status};

#[derive(Debug, Parser)]
#[command(name = "sepsis-mbrl", version, about = "Model-based policy learning and off-policy evaluation for sepsis cohorts")]
pub struct Cli {
    /// JSON configuration file; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Reruns the stage even when up to date and accepts inputs produced
    /// under another configuration.
    #[arg(long, global = true)]
    pub force: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with its ground truth.
    Synth,
    /// Import a cohort CSV (`paths.input`) and fit its dose bins.
    Ingest,
    /// Fit the environment model.
    FitDynamics,
    /// Fit the behavior-cloned clinician policy.
    FitBehavior,
    /// Optimize a policy inside the environment model.
    TrainPolicy,
    /// Off-policy evaluation of the blended policies on the test split.
    Evaluate,
    /// Replay logged actions through the environment model.
    RolloutExport,
}

impl Command {
    pub fn stage(self) -> Stage {
        match self {
            Command::Synth => Stage::Synth,
            Command::Ingest => Stage::Ingest,
            Command::FitDynamics => Stage::FitDynamics,
            Command::FitBehavior => Stage::FitBehavior,
            Command::TrainPolicy => Stage::TrainPolicy,
            Command::Evaluate => Stage::Evaluate,
            Command::RolloutExport => Stage::RolloutExport,
        }
    }
}

/// Configuration after applying the command-line overrides.
pub fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.paths.out = out.clone();
    }
    Ok(config)
}

pub fn run(cli: &Cli) -> Result<StageOutcome> {
    let ctx = RunContext::new(load_config(cli)?, cli.force)?;
    let outcome = run_stage(cli.command.stage(), &ctx)?;
    match outcome.status {
        Status::UpToDate => println!("{}: up-to-date", outcome.stage),
        Status::Ran => println!("{}: wrote {}", outcome.stage, outcome.outputs.join(", ")),
    }
    Ok(outcome)
}
