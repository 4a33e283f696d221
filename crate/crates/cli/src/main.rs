//! `milgrade` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use milgrade::heatmap::TargetClass;
use milgrade::mil::ProjActivation;

/// Slide-level growth-pattern classification from patch embeddings.
#[derive(Debug, Parser)]
#[command(name = "milgrade", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cut a slide raster into patches, optionally labeled by an annotation mask
    Extract(ExtractArgs),
    /// Generate a synthetic embedding cohort
    Synth(SynthArgs),
    /// Train the patch-level linear probe
    TrainProbe(TrainProbeArgs),
    /// Train the attention MIL head
    TrainMil(TrainMilArgs),
    /// Patient-level stratified k-fold cross-validation
    Cv(CvArgs),
    /// Score a cohort with a MIL checkpoint
    Eval(EvalArgs),
    /// Score a cohort with a probe checkpoint and majority voting
    VoteEval(VoteEvalArgs),
    /// Render a per-patch attention map for one slide
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// RGB slide raster (PPM)
    #[arg(long)]
    image: PathBuf,
    /// Annotation mask (PGM, raw class ids)
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = milgrade::data::DEFAULT_PATCH_SIZE)]
    patch_size: u32,
    #[arg(long, default_value_t = milgrade::data::DEFAULT_TISSUE_MIN)]
    tissue_min: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    slides: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    min_patches: usize,
    #[arg(long, default_value_t = 200)]
    max_patches: usize,
    /// Lower bound of the predominant-pattern fraction
    #[arg(long, default_value_t = 0.5)]
    min_fraction: f64,
    #[arg(long, default_value_t = 0.8)]
    max_fraction: f64,
    /// Distance between class means, in noise units
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Draw the non-predominant patches from one shared component that
    /// resembles this patch class
    #[arg(long, value_parser = parse_patch_class)]
    confuser: Option<u8>,
    #[arg(long, default_value_t = milgrade::data::DEFAULT_PATCH_SIZE)]
    patch_size: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Args)]
struct TrainFlags {
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Share of non-test patients held out for early stopping
    #[arg(long, default_value_t = 0.25)]
    val_fraction: f64,
}

#[derive(Debug, Clone, Args)]
struct ModelFlags {
    #[arg(long, default_value_t = 512)]
    proj_dim: usize,
    #[arg(long, default_value_t = 256)]
    attn_dim: usize,
    #[arg(long, default_value = "relu", value_parser = parse_activation)]
    activation: ProjActivation,
}

#[derive(Debug, Args)]
struct TrainProbeArgs {
    /// Cohort directory with patch labels
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 15)]
    patience: usize,
    #[command(flatten)]
    train: TrainFlags,
    /// Training log CSV
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainMilArgs {
    #[arg(long)]
    bags: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    model: ModelFlags,
    /// Training log CSV
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Arm {
    /// attention MIL head
    Mil,
    /// patch probe + majority vote
    Vote,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[arg(long)]
    bags: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, value_enum, default_value_t = Arm::Mil)]
    arm: Arm,
    /// Learning rate [default: 1e-4 for mil, 1e-5 for vote]
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size [default: 1 for mil, 8 for vote]
    #[arg(long)]
    batch: Option<usize>,
    /// Early-stopping patience [default: 20 for mil, 15 for vote]
    #[arg(long)]
    patience: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    model: ModelFlags,
    /// Per-fold metrics CSV
    #[arg(long)]
    report: PathBuf,
    /// Fold plan JSON
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Directory for per-fold training log CSVs
    #[arg(long)]
    logs: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    bags: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Per-slide predictions CSV
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct VoteEvalArgs {
    #[arg(long)]
    bags: PathBuf,
    #[arg(long)]
    probe: PathBuf,
    /// Per-slide predictions CSV
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    #[arg(long)]
    bags: PathBuf,
    #[arg(long)]
    slide: String,
    #[arg(long)]
    model: PathBuf,
    /// Slide class name or index, or "predicted"
    #[arg(long = "class", default_value = "predicted", value_parser = parse_target)]
    target: TargetClass,
    /// Output pixels per patch
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    cell: u32,
    #[arg(long, default_value_t = 1.0)]
    p_low: f64,
    #[arg(long, default_value_t = 99.0)]
    p_high: f64,
    /// Directory for `<slide>.pgm` and `<slide>.csv`
    #[arg(long)]
    out: PathBuf,
}

fn parse_patch_class(s: &str) -> Result<u8, String> {
    milgrade::PATCH_CLASSES
        .iter()
        .position(|c| c.eq_ignore_ascii_case(s))
        .map(|i| i as u8)
        .ok_or_else(|| format!("unknown patch class {s:?}"))
}

fn parse_activation(s: &str) -> Result<ProjActivation, String> {
    s.parse().map_err(|e: milgrade::Error| e.to_string())
}

fn parse_target(s: &str) -> Result<TargetClass, String> {
    s.parse().map_err(|e: milgrade::Error| e.to_string())
}

/// Malformed arguments that clap cannot catch on its own.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<milgrade::Error>() {
        Some(milgrade::Error::Numeric(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // library errors already carry their cause in the message
            match e.downcast_ref::<milgrade::Error>() {
                Some(inner) => eprintln!("error: {inner}"),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
