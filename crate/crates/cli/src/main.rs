//! `sonotrack` command-line front end: simulate → (train | baseline) → infer
//! → evaluate → compound.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "sonotrack",
    version,
    about = "Sensorless freehand 3D ultrasound toolkit"
)]
pub struct Cli {
    /// Seed for every random choice of the run (default: `seed` from the
    /// config file, else 0).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat key=value configuration file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one scan, or a dataset of randomized scans.
    Simulate(SimulateArgs),
    /// Train the motion network on a dataset directory.
    Train(TrainArgs),
    /// Predict relative and absolute poses for a scan.
    Infer(InferArgs),
    /// Score predicted poses against the truth.
    Evaluate(EvaluateArgs),
    /// Compound a scan into a voxel volume.
    Compound(CompoundArgs),
    /// Calibrate the speckle-decorrelation baseline on simulated pairs.
    CalibrateBaseline(CalibrateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Sweep shape: linear, s_curve or c_curve.
    #[arg(long)]
    pub shape: Option<String>,
    /// Frames per scan.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Mean elevational step (mm).
    #[arg(long)]
    pub step: Option<f64>,
    /// Frame side in pixels.
    #[arg(long)]
    pub extent: Option<usize>,
    /// Number of scans; more than one writes a dataset of randomized scans.
    #[arg(long)]
    pub scans: Option<usize>,
    /// Subject tag of a single scan.
    #[arg(long)]
    pub subject: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory (scan subdirectories).
    #[arg(long)]
    pub data: PathBuf,
    /// Total optimization steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Model preset: toy, tiny or paper.
    #[arg(long)]
    pub scale: Option<String>,
    /// Sequence length s.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Replace the attention module by plain pooling (ablation).
    #[arg(long)]
    pub no_attention: bool,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Scan directory.
    #[arg(long)]
    pub scan: PathBuf,
    /// Model checkpoint.
    #[arg(long, group = "predictor")]
    pub checkpoint: Option<PathBuf>,
    /// Calibration CSV: use the decorrelation baseline.
    #[arg(long, group = "predictor")]
    pub baseline: Option<PathBuf>,
    /// Debug mode: pass the scan's true motions through the pipeline.
    #[arg(long, group = "predictor")]
    pub truth: bool,
    /// Also write attention score maps (model with attention only).
    #[arg(long)]
    pub attention: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Scan directory (geometry; default truth poses).
    #[arg(long)]
    pub scan: PathBuf,
    /// Predicted absolute poses CSV.
    #[arg(long)]
    pub pred: PathBuf,
    /// True absolute poses CSV (default: the scan's poses).
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompoundArgs {
    /// Scan directory.
    #[arg(long)]
    pub scan: PathBuf,
    /// Absolute poses CSV (default: the scan's true poses).
    #[arg(long)]
    pub poses: Option<PathBuf>,
    /// Voxel edge (mm).
    #[arg(long)]
    pub voxel: Option<f64>,
    /// Hole-filling radius in voxels (off when absent).
    #[arg(long)]
    pub fill_radius: Option<usize>,
    /// Provenance tag: truth, predicted or baseline.
    #[arg(long)]
    pub source: Option<String>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Take the frame geometry from this scan.
    #[arg(long)]
    pub scan: Option<PathBuf>,
    /// Frame side in pixels (without --scan).
    #[arg(long)]
    pub extent: Option<usize>,
    /// Pairs simulated per gap.
    #[arg(long)]
    pub pairs_per_gap: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
