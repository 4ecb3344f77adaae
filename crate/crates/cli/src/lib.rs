//! Command-line front end for the nodetf experiments.
//!
//! Each subcommand starts from its default [`spec::ExperimentSpec`], layers an
//! optional `--config` file on top, then applies individual flags.

pub mod checkpoint;
pub mod commands;
pub mod spec;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nodetf::{Architecture, RhsVariant};
use thiserror::Error;

use crate::spec::{CommandKind, ExperimentSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Failure(_) => EXIT_FAILURE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "nodetf",
    version,
    about = "Neural-ODE vs vanilla Transformer experiments on PARITY"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write every binary string up to --max-len with its parity label.
    GenData(Options),
    /// Train one model and save its best checkpoint.
    Train(Options),
    /// Train a learning-rate x seed ensemble.
    Ensemble(Options),
    /// Vanilla vs neural-ODE ensembles over a grid of (d, N).
    Compare(Options),
    /// Accuracy histograms for the four attention/skip variants.
    Variants(Options),
    /// Ensembles over a grid of regularization strengths.
    RegSweep(Options),
    /// Forward-Euler residual decay of a trained checkpoint.
    ResidualProbe(Options),
}

impl Command {
    fn split(self) -> (CommandKind, Options) {
        match self {
            Command::GenData(o) => (CommandKind::GenData, o),
            Command::Train(o) => (CommandKind::Train, o),
            Command::Ensemble(o) => (CommandKind::Ensemble, o),
            Command::Compare(o) => (CommandKind::Compare, o),
            Command::Variants(o) => (CommandKind::Variants, o),
            Command::RegSweep(o) => (CommandKind::RegSweep, o),
            Command::ResidualProbe(o) => (CommandKind::ResidualProbe, o),
        }
    }
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    match s {
        "vanilla" => Ok(Architecture::Vanilla),
        "node" => Ok(Architecture::Node),
        _ => Err(format!("expected vanilla or node, got {s}")),
    }
}

fn parse_variant(s: &str) -> Result<RhsVariant, String> {
    match s {
        "basic" => Ok(RhsVariant::Basic),
        "mhsa_skip" | "mhsa-skip" => Ok(RhsVariant::MhsaSkip),
        "euler_analogue" | "euler-analogue" => Ok(RhsVariant::EulerAnalogue),
        _ => Err(format!("expected basic, mhsa_skip or euler_analogue, got {s}")),
    }
}

#[derive(Debug, Default, Clone, Args)]
pub struct Options {
    /// TOML experiment spec; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (output file for gen-data and residual-probe).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Embedding dimension(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub d: Vec<usize>,
    /// Block count(s), comma separated.
    #[arg(long = "n-blocks", value_delimiter = ',')]
    pub n_blocks: Vec<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Total runs per ensemble; must be a multiple of the learning-rate grid size.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Worst runs discarded before averaging.
    #[arg(long)]
    pub drop_k: Option<usize>,
    /// Regularization strength(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lr_grid: Vec<f64>,
    /// Seeds per learning rate.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// First seed; ensembles use consecutive seeds from here.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Learning rate for `train`.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// vanilla or node; restricts `compare` to that architecture.
    #[arg(long, value_parser = parse_arch)]
    pub arch: Option<Architecture>,
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<RhsVariant>,
    /// Time-dependent attention (true/false).
    #[arg(long)]
    pub td_mhsa: Option<bool>,
    /// Solver absolute and relative tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Probe string as bits, e.g. 101101.
    #[arg(long)]
    pub tokens: Option<String>,
    /// Euler step counts for the residual probe.
    #[arg(long, value_delimiter = ',')]
    pub steps: Vec<usize>,
}

/// Builds the effective spec: defaults, then the config file, then flags.
pub fn resolve(kind: CommandKind, opts: &Options) -> Result<ExperimentSpec, CliError> {
    let mut spec = match &opts.config {
        Some(path) => {
            let spec = ExperimentSpec::load(path)?;
            if spec.command != kind {
                return Err(CliError::Usage(format!(
                    "config is for `{}`, not `{kind}`",
                    spec.command
                )));
            }
            spec
        }
        None => ExperimentSpec::defaults(kind),
    };
    if let Some(v) = &opts.out {
        spec.out = v.clone();
    }
    if !opts.d.is_empty() {
        spec.model.d = opts.d.clone();
    }
    if !opts.n_blocks.is_empty() {
        spec.model.n_blocks = opts.n_blocks.clone();
    }
    if let Some(v) = opts.max_len {
        spec.data.max_len = v;
    }
    if !opts.lr_grid.is_empty() {
        spec.training.lr_grid = opts.lr_grid.clone();
    }
    if let Some(v) = opts.seeds {
        spec.training.seeds_per_lr = v;
    }
    if let Some(runs) = opts.runs {
        let grid = spec.training.lr_grid.len().max(1);
        if runs == 0 || runs % grid != 0 {
            return Err(CliError::Usage(format!(
                "--runs {runs} is not a positive multiple of the {grid}-entry learning-rate grid"
            )));
        }
        if opts.seeds.is_some_and(|s| s * grid != runs) {
            return Err(CliError::Usage("--runs and --seeds disagree".into()));
        }
        spec.training.seeds_per_lr = runs / grid;
    }
    if let Some(v) = opts.drop_k {
        spec.training.drop_k = v;
    }
    if !opts.lambda.is_empty() {
        spec.training.lambdas = opts.lambda.clone();
    }
    if let Some(v) = opts.workers {
        spec.workers = v;
    }
    if let Some(v) = opts.seed {
        spec.seed_base = v;
    }
    if let Some(v) = opts.lr {
        spec.training.learning_rate = v;
    }
    if let Some(v) = opts.epochs {
        spec.training.max_epochs = v;
    }
    if opts.batch_size.is_some() {
        spec.training.batch_size = opts.batch_size;
    }
    if let Some(v) = opts.arch {
        spec.model.architecture = v;
        spec.compare.architectures = vec![v];
    }
    if let Some(v) = opts.variant {
        spec.model.rhs_variant = v;
    }
    if let Some(v) = opts.td_mhsa {
        spec.model.mhsa_time_dependent = v;
    }
    if let Some(tol) = opts.tol {
        spec.model.solver = spec.model.solver.with_tolerance(tol);
    }
    if opts.checkpoint.is_some() {
        spec.probe.checkpoint = opts.checkpoint.clone();
    }
    if let Some(v) = &opts.tokens {
        spec.probe.tokens = v.clone();
    }
    if !opts.steps.is_empty() {
        spec.probe.step_counts = opts.steps.clone();
    }
    spec.validate()?;
    Ok(spec)
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (kind, opts) = cli.command.split();
    match resolve(kind, &opts).and_then(|spec| commands::execute(&spec)) {
        Ok(report) => {
            println!("{report}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
