//! `tmcnn`: detection, training, synthetic data, evaluation and the
//! annotation service from one executable.
//!
//! Exit status is 0 on success, 1 when a command fails and 2 on a usage
//! error. Diagnostics go to standard error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "tmcnn", version, about = "Junction and terminal detector for labyrinthine stripe images")]
struct Cli {
    /// Worker threads for per-image and per-template work [default: available cores]
    #[arg(long, global = true, env = "TMCNN_JOBS")]
    jobs: Option<usize>,

    /// Log filter (error, warn, info, debug, trace)
    #[arg(long, global = true, default_value = "info", env = "TMCNN_LOG")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Detect junctions and terminals; writes a DetectionSet JSON and an overlay PNG per image
    Detect(DetectArgs),
    /// Template bank utilities
    #[command(subcommand)]
    Templates(TemplatesCommand),
    /// Train the patch classifier on an exported dataset
    Train(TrainArgs),
    /// Generate synthetic labyrinth images with skeleton ground truth; binary fields go to <out>/field/
    Synth(SynthArgs),
    /// Score predicted DetectionSets against ground truth
    Eval(EvalArgs),
    /// Mean and spread of defect counts per step across runs
    Counts(CountsArgs),
    /// Run the annotation service
    Serve(ServeArgs),
}

/// Template bank shape shared by every command that builds one.
#[derive(Debug, Clone, Args)]
struct BankArgs {
    /// Line width of the drawn template strips, in pixels
    #[arg(long, default_value_t = 3.0)]
    stroke: f64,

    /// Which junction gaps must lie in 70°..190°
    #[arg(long, value_enum, default_value_t = GapRuleArg::TwoGap)]
    gap_rule: GapRuleArg,

    /// JSON mask table replacing the built-in one
    #[arg(long, value_name = "FILE")]
    masks: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GapRuleArg {
    TwoGap,
    ThreeGap,
}

#[derive(Debug, Args)]
struct DetectArgs {
    /// Image file or directory of PNG images
    #[arg(long)]
    input: PathBuf,

    /// Candidate threshold on the fused correlation score, in (0, 1)
    #[arg(long, short, default_value_t = 0.5)]
    threshold: f64,

    /// Classifier weights (.tmcw); without them labels come from template matching alone
    #[arg(long)]
    weights: Option<PathBuf>,

    /// Output directory
    #[arg(long)]
    out: PathBuf,

    /// Resize every image to WxH before the median filter
    #[arg(long, value_parser = commands::parse_size)]
    resize: Option<(usize, usize)>,

    /// Also write the fused correlation map as a 16-bit PNG
    #[arg(long)]
    save_map: bool,

    #[command(flatten)]
    bank: BankArgs,
}

#[derive(Debug, Subcommand)]
enum TemplatesCommand {
    /// Write every template and mask as PNGs plus a JSON manifest
    Dump {
        /// Output directory
        #[arg(long)]
        out: PathBuf,

        #[command(flatten)]
        bank: BankArgs,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset directory with manifest.json and patches/
    #[arg(long)]
    dataset: PathBuf,

    #[arg(long, default_value_t = 20)]
    epochs: usize,

    /// Adam learning rate
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,

    #[arg(long, default_value_t = 64)]
    batch: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Fraction of each class held out for validation
    #[arg(long, default_value_t = 0.1)]
    validation: f64,

    /// Dropout rate before the dense layer
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,

    /// Disable random 90° rotations of training patches
    #[arg(long)]
    no_augment: bool,

    /// Output weight file (.tmcw); a .json training report is written beside it
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Number of images
    #[arg(long, default_value_t = 1)]
    count: usize,

    /// Image size WxH
    #[arg(long, value_parser = commands::parse_size, default_value = "1300x972")]
    size: (usize, usize),

    /// Stripe period in pixels
    #[arg(long = "lambda", default_value_t = 12.0)]
    wavelength: f64,

    /// Width of the band-pass annulus as a fraction of 1/lambda
    #[arg(long, default_value_t = 0.25)]
    bandwidth: f64,

    /// Gaussian blur sigma of the rendered image
    #[arg(long, default_value_t = 1.0)]
    blur: f64,

    /// Additive Gaussian noise sigma of the rendered image
    #[arg(long, default_value_t = 0.03)]
    noise: f64,

    /// Seed of the first image; image i uses seed + i
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Stripe phase whose skeleton defines the ground truth
    #[arg(long, value_enum, default_value_t = PhaseArg::Dark)]
    phase: PhaseArg,

    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PhaseArg {
    Dark,
    Bright,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory of predicted DetectionSet JSON files
    #[arg(long)]
    pred: PathBuf,

    /// Directory of ground-truth DetectionSet JSON files, paired by image name
    #[arg(long)]
    gt: PathBuf,

    /// A match needs box IoU strictly above this
    #[arg(long, default_value_t = 0.5)]
    iou: f64,

    /// Side of the square box drawn around every point
    #[arg(long = "box", default_value_t = 21)]
    box_side: usize,

    /// Ignore predictions closer than this to an image edge
    #[arg(long, default_value_t = 6.0)]
    border_margin: f64,

    /// Match regardless of junction/terminal class
    #[arg(long)]
    class_agnostic: bool,

    /// Comma-separated score thresholds; each keeps the predictions scoring at least that much
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<f64>>,

    /// Also write the metrics (or sweep table) as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CountsArgs {
    /// Directory the run manifest's file names are relative to
    #[arg(long)]
    detections: PathBuf,

    /// JSON run manifest: {"runs": [{"name": ..., "steps": [{"step": 0, "file": "a.json"}, ...]}]}
    #[arg(long)]
    runs: PathBuf,

    /// Output CSV
    #[arg(long, default_value = "counts.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Project directory; PNGs under images/ are registered on start
    #[arg(long)]
    project: PathBuf,

    #[arg(long, default_value_t = 8080)]
    port: u16,

    /// Address to bind
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,

    /// Proposal threshold used when a request gives none
    #[arg(long, short, default_value_t = 0.5)]
    threshold: f64,

    /// Classifier weights for proposals with use_model
    #[arg(long)]
    weights: Option<PathBuf>,

    /// Resize every image to WxH before the median filter
    #[arg(long, value_parser = commands::parse_size)]
    resize: Option<(usize, usize)>,

    /// Box side used when excluding mined negatives around positives
    #[arg(long = "box", default_value_t = 21)]
    box_side: usize,

    #[command(flatten)]
    bank: BankArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_target(false)
        .init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot size the worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
