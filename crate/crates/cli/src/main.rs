//! `lcdc` command-line front end.
//!
//! Results go to stdout as CSV or `key=value` lines; progress and
//! diagnostics go to stderr.

mod artifacts;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "lcdc", version, about = "Locally-consistent deformable convolution toolkit")]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable op and the toy network.
    Gradcheck(GradcheckArgs),
    /// Motion-encoding check on a warped multilinear image.
    Prop1(Prop1Args),
    /// Parameter counts of shared-offset and dense-offset blocks.
    Params(ParamsArgs),
    /// Offsets, motion fields and energy maps of a frame sequence.
    Motion(MotionArgs),
    /// Synthetic snippets or labelled sequences.
    Gen(GenArgs),
    /// Train the toy network on synthetic data.
    Train(TrainArgs),
    /// Frame accuracy, edit score and F1@k of two label files.
    Eval(EvalArgs),
    /// Equivalence and degeneracy suites.
    Equiv(EquivArgs),
    /// Kernel tap table and fusion temporal arithmetic.
    Taps(TapsArgs),
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Debug, Args)]
struct Prop1Args {
    /// Image extents as `H,W`.
    #[arg(long, default_value = "14,14", value_parser = parse_usize_pair)]
    grid: (usize, usize),
    /// Constant motion as `dr,dc`.
    #[arg(long, default_value = "1,0", value_parser = parse_f64_pair, allow_hyphen_values = true)]
    translation: (f64, f64),
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square kernel size.
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, default_value_t = 1)]
    dilation: usize,
    #[arg(long, default_value_t = 2)]
    in_channels: usize,
    #[arg(long, default_value_t = 3)]
    out_channels: usize,
    /// Keep the previous offsets instead of encoding the motion.
    #[arg(long)]
    violate: bool,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    /// Training configuration (JSON) whose network is counted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kh: Option<usize>,
    #[arg(long)]
    kw: Option<usize>,
    /// Deformable groups of the dense-offset variant.
    #[arg(long)]
    groups: Option<usize>,
    /// Feature channels entering each block.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
}

#[derive(Debug, Args)]
struct MotionArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// TSR files: single `H×W×C` frames or `T×H×W×C` stacks, in order.
    #[arg(long, num_args = 1.., required = true)]
    frames: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Motion magnitudes below this are drawn black.
    #[arg(long, default_value_t = 0.0)]
    suppress: f64,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Generator configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Only this class (up, down, left, right, cw, ccw).
    #[arg(long)]
    class: Option<String>,
    /// Snippets per class.
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Split index mixed into sample seeds (0 train, 1 test).
    #[arg(long, default_value_t = 0)]
    split: u64,
    /// Write one long labelled sequence instead of snippets.
    #[arg(long)]
    sequence: bool,
    #[arg(long, default_value_t = 8)]
    segments: usize,
    #[arg(long, default_value_t = 6)]
    min_len: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training configuration (JSON); defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Appearance-only baseline fed one frame per snippet.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop after the first epoch whose test accuracy reaches this percent.
    #[arg(long)]
    stop_at: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    pred: PathBuf,
    gt: PathBuf,
    /// Overlap thresholds in percent.
    #[arg(long = "k", value_delimiter = ',', default_value = "10")]
    k: Vec<f64>,
    /// Label treated as background by the segment metrics.
    #[arg(long)]
    background: Option<String>,
    /// Keep the background label in the segment metrics.
    #[arg(long)]
    include_background: bool,
}

#[derive(Debug, Args)]
struct EquivArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Frames per degeneracy case.
    #[arg(long, default_value_t = 6)]
    frames: usize,
}

#[derive(Debug, Args)]
struct TapsArgs {
    #[arg(long, default_value_t = 3)]
    kh: usize,
    #[arg(long, default_value_t = 3)]
    kw: usize,
    #[arg(long, default_value_t = 1)]
    dilation: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Defaults to same padding.
    #[arg(long)]
    padding: Option<usize>,
    /// Training configuration (JSON) supplying the fusion stages.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Time steps entering fusion; defaults to the snippet length minus one.
    #[arg(long)]
    steps: Option<usize>,
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> Result<(T, T), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected two comma-separated values, got '{s}'"))?;
    let p = |v: &str| v.trim().parse::<T>().map_err(|_| format!("invalid number '{v}'"));
    Ok((p(a)?, p(b)?))
}

fn parse_usize_pair(s: &str) -> Result<(usize, usize), String> {
    parse_pair(s)
}

fn parse_f64_pair(s: &str) -> Result<(f64, f64), String> {
    parse_pair(s)
}

/// Reads a training configuration, falling back to defaults.
pub(crate) fn read_train_config(path: Option<&PathBuf>) -> Result<lcdc::train::TrainConfig> {
    match path {
        None => Ok(Default::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

/// Outcome of a subcommand: `Ok(false)` reports a failed verification.
fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Gradcheck(a) => verify::gradcheck(&a),
        Command::Prop1(a) => verify::prop1(&a),
        Command::Params(a) => verify::params(&a),
        Command::Equiv(a) => verify::equiv(&a),
        Command::Taps(a) => verify::taps(&a),
        Command::Motion(a) => artifacts::motion(&a),
        Command::Gen(a) => artifacts::gen(&a),
        Command::Train(a) => artifacts::train(&a),
        Command::Eval(a) => artifacts::eval(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
