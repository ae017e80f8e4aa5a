//! Command-line driver: analysis of trained checkpoints, toy training runs,
//! the emergence and correlation experiments, and output validation.

pub mod analyze;
pub mod commands;
pub mod error;
pub mod kv;
pub mod prompts;
pub mod specs;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use coupling_core::jacobian::FinalLayerMode;

use crate::analyze::{AnalyzeOptions, Scheme};
pub use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(
    name = "coupling-probe",
    version,
    about = "Block Jacobian coupling and hidden-state trajectory analysis"
)]
pub struct Cli {
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "COUPLING_PROBE_JOBS", default_value_t = 0)]
    pub jobs: usize,
    /// Log more (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Coupling, trajectory and spectrum tables for one checkpoint.
    Analyze(AnalyzeArgs),
    /// Train a toy model from a spec file.
    Train(SpecArgs),
    /// Train (or reuse checkpoints) and track metrics across training.
    Emergence(SpecArgs),
    /// Train several runs and correlate coupling with validation loss.
    Sweep(SpecArgs),
    /// Check every known output file in a directory against its schema.
    Validate { dir: PathBuf },
}

#[derive(Debug, Args)]
pub struct SpecArgs {
    /// `key = value` spec file.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One prompt per line: comma-separated token ids or a-z text.
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of singular directions; overrides --k-ratio.
    #[arg(long)]
    pub k: Option<usize>,
    /// K as a fraction of d_model.
    #[arg(long, default_value_t = 0.1)]
    pub k_ratio: f64,
    /// Norm order of the normalizing singular-value sum.
    #[arg(long, default_value_t = 1.0)]
    pub p: f64,
    /// Blocks to analyze, 1-based (default: all).
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// depthwise, self, fixed_input, fixed_output, cross_b.
    #[arg(long, value_delimiter = ',', default_value = "depthwise,self")]
    pub schemes: Vec<Scheme>,
    /// Layer pair for the token-wise schemes (default: middle pair).
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub token_layers: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub fixed_input_token: usize,
    /// Default: the last token.
    #[arg(long)]
    pub fixed_output_token: Option<usize>,
    /// Seed for the perturbation probe.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1")]
    pub perturb_scales: Vec<f64>,
    /// Logit-lens entropy without the final layer norm.
    #[arg(long)]
    pub entropy_raw: bool,
    /// Differentiate the final block through the final layer norm.
    #[arg(long)]
    pub include_final_ln: bool,
}

impl AnalyzeArgs {
    pub fn options(&self) -> AnalyzeOptions {
        AnalyzeOptions {
            k: self.k,
            k_ratio: self.k_ratio,
            p: self.p,
            layers: self.layers.clone(),
            schemes: self.schemes.clone(),
            token_layers: self.token_layers.as_ref().map(|v| (v[0], v[1])),
            fixed_input_token: self.fixed_input_token,
            fixed_output_token: self.fixed_output_token,
            seed: self.seed,
            perturb_scales: self.perturb_scales.clone(),
            entropy_raw: self.entropy_raw,
            final_mode: if self.include_final_ln {
                FinalLayerMode::IncludeFinalLn
            } else {
                FinalLayerMode::ExcludeFinalLn
            },
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Analyze(a) => commands::run_analyze(&a.checkpoint, &a.prompts, &a.out, &a.options()),
        Command::Train(s) => commands::run_train(&s.spec, &s.out),
        Command::Emergence(s) => commands::run_emergence(&s.spec, &s.out),
        Command::Sweep(s) => commands::run_sweep(&s.spec, &s.out),
        Command::Validate { dir } => commands::run_validate(dir),
    }
}
