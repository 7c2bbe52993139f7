//! `iagc`: data generation, training, inference, evaluation and checks.
//!
//! Exit status is 0 on success, 1 for invalid input or configuration and
//! 2 for failures while running.

mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use overrides::ConfigArgs;

// glibc malloc maps and unmaps the large attention buffers on every step,
// which costs a page fault per 4 KiB; mimalloc keeps them mapped.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "iagc", version, about = "Low-light image enhancement with illumination-aware gamma correction")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write synthetic low/normal-light pairs and a manifest.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Enhance one image with a trained checkpoint.
    Infer(InferArgs),
    /// Mean PSNR and SSIM between two directories of images.
    Eval(EvalArgs),
    /// Time the exact and Taylor gamma paths.
    BenchGamma(BenchArgs),
    /// Train and score the gamma-module and attention ablations.
    Ablate(AblateArgs),
    /// Finite-difference gradient checks of every op and the pipeline.
    GradCheck(GradCheckArgs),
}

#[derive(clap::Args, Debug)]
struct GenDataArgs {
    /// Output directory; receives low/, gt/ and manifest.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated subset of gradient, checkers, blobs, strokes.
    #[arg(long, value_delimiter = ',', default_value = "gradient,checkers,blobs,strokes")]
    patterns: Vec<String>,
    /// Degradation exponent range, `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [2.0, 5.0])]
    gamma_range: Vec<f64>,
    /// Exposure scale range, `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.1, 0.5])]
    alpha_range: Vec<f64>,
    /// Noise standard deviation range, `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.0, 0.05])]
    noise_range: Vec<f64>,
    /// Ground-truth intensity range, `lo,hi`.
    #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.5, 1.0])]
    gt_range: Vec<f64>,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from `<out_dir>/checkpoint.iagc` when it exists.
    #[arg(long)]
    resume: bool,
    /// Stop once this many steps are complete (the schedule still spans
    /// the full run).
    #[arg(long)]
    until: Option<u64>,
    /// Print a progress line every N steps.
    #[arg(long, default_value_t = 25)]
    log_every: u64,
}

#[derive(clap::Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration; defaults to config.txt next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    /// Where to write R_s3.
    #[arg(long)]
    output: PathBuf,
    /// Also write every stage and the local gamma map into this directory.
    #[arg(long)]
    dump_stages: Option<PathBuf>,
    /// Write spatial attention maps and attention weights into this directory.
    #[arg(long)]
    dump_attn: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
}

#[derive(clap::Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 1 << 20)]
    elements: usize,
    #[arg(long, default_value_t = 9)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write per-iteration timings as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct AblateArgs {
    /// Variants to run (G1..G3, A1..A4); all when omitted.
    #[arg(long = "variant", value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    /// Side of the square synthetic images.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct GradCheckArgs {
    /// Only run cases whose name contains this string.
    #[arg(long)]
    filter: Option<String>,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Cmd::GenData(a) => commands::gen_data(a),
        Cmd::Train(a) => commands::train(a),
        Cmd::Infer(a) => commands::infer(a),
        Cmd::Eval(a) => commands::eval(a),
        Cmd::BenchGamma(a) => commands::bench_gamma(a),
        Cmd::Ablate(a) => commands::ablate(a),
        Cmd::GradCheck(a) => commands::grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
