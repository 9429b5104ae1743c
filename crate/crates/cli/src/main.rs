//! `pmcrnet` command-line tool.
//!
//! Exit codes: 0 success, 1 invalid arguments or configuration, 2 file
//! system or decoding failure, 3 a verification suite reported failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pmcrnet::loss::TauMode;

#[derive(Parser, Debug)]
#[command(
    name = "pmcrnet",
    version,
    about = "Video frame interpolation: inference, training, evaluation and verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the midpoint frame between two images.
    Interpolate(InterpolateArgs),
    /// Train a network on a triplet dataset.
    Train(TrainArgs),
    /// Measure a checkpoint on a triplet dataset.
    Eval(EvalArgs),
    /// Time the forward pass on random weights.
    Bench(BenchArgs),
    /// Finite-difference checks of every differentiable operator and the full network.
    Gradcheck(GradcheckArgs),
    /// Quick invariant suite: kernels, warping, blending, losses, metrics, shapes.
    Selftest(SelftestArgs),
    /// Write a synthetic triplet dataset with known motion.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[arg(long)]
    frame0: PathBuf,
    #[arg(long)]
    frame1: PathBuf,
    /// Checkpoint to load.
    #[arg(long)]
    weights: PathBuf,
    /// Output image (.png or .ppm).
    #[arg(long)]
    out: PathBuf,
    /// Write color-wheel renderings and raw f32 planes of both flows here.
    #[arg(long, value_name = "DIR")]
    dump_flow: Option<PathBuf>,
    /// Write the image estimate of every pyramid level here.
    #[arg(long, value_name = "DIR")]
    dump_levels: Option<PathBuf>,
    /// Threads for the forward convolutions.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Feed unwarped features to the decoders.
    Pmr,
    /// Drop the previous image estimate from the decoder input.
    Pcr,
    /// Replace warp-and-blend synthesis with a direct image head.
    Csm,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset root containing `sequences/`.
    #[arg(long)]
    data: PathBuf,
    /// List file naming one sequence per line.
    #[arg(long)]
    list: PathBuf,
    /// Directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Small overfitting preset: 4 triplets, 96x96 crops, 300 steps.
    #[arg(long)]
    toy: bool,
    /// Disable one component of the network; may be repeated.
    #[arg(long, value_enum)]
    ablate: Vec<Ablation>,
    /// Weighting of the auxiliary pyramid levels over training.
    #[arg(long, default_value = "annealed", value_parser = parse_tau)]
    tau: TauMode,
    /// Side of the square training crop.
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Continue from this checkpoint (weights and optimizer moments).
    #[arg(long, value_name = "CHECKPOINT")]
    resume: Option<PathBuf>,
    /// Do not echo the per-step log to standard output.
    #[arg(long)]
    quiet: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    list: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long, required_unless_present = "predict_gt")]
    weights: Option<PathBuf>,
    /// Comma-separated subset of psnr, ssim, ie.
    #[arg(long, default_value = "psnr,ssim,ie")]
    metrics: String,
    /// Also write the report to this file.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Score the ground truth against itself (harness check).
    #[arg(long, hide = true)]
    predict_gt: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

/// `WIDTHxHEIGHT`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameSize {
    pub width: usize,
    pub height: usize,
}

impl FromStr for FrameSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WIDTHxHEIGHT, got '{s}'"))?;
        let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
        match (parse(w), parse(h)) {
            (Some(width), Some(height)) => Ok(FrameSize { width, height }),
            _ => Err(format!("expected positive WIDTHxHEIGHT, got '{s}'")),
        }
    }
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value = "640x480")]
    size: FrameSize,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    iters: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Untimed passes before measuring.
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Fault {
    /// Scale the conv2d kernel gradient by 1.5.
    ConvBackward,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the end-to-end network check.
    #[arg(long)]
    ops_only: bool,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<Fault>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<Fault>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Dataset root to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value = "128x128")]
    size: FrameSize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Name of the list file written under the root.
    #[arg(long, default_value = "tri_trainlist.txt")]
    list_name: String,
}

fn parse_tau(s: &str) -> Result<TauMode, String> {
    s.parse().map_err(|e: pmcrnet::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Interpolate(a) => commands::interpolate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Selftest(a) => commands::selftest(a),
        Command::Synth(a) => commands::synth(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
