use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod plot;

/// Exit code for bad input: arguments, config, files, shapes.
const EXIT_VALIDATION: u8 = 2;
/// Exit code for a run that started but could not finish.
const EXIT_ABORT: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl From<matssl::Error> for CliError {
    fn from(e: matssl::Error) -> Self {
        let code = if e.is_validation() { EXIT_VALIDATION } else { EXIT_ABORT };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "matssl", version, about = "Contrastive pretraining and segmentation of micrographs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic Voronoi-grain micrographs with phase masks.
    Synth(SynthArgs),
    /// Cut images into sliding-window patches and write a split manifest.
    Patchify(PatchifyArgs),
    /// Supervised encoder pretraining on a labeled source set.
    PretrainSource(TrainArgs),
    /// Contrastive adaptation of an encoder on unlabeled patches.
    Ssl(TrainArgs),
    /// End-to-end segmentation fine-tuning with Dice loss.
    Finetune(TrainArgs),
    /// Score a segmentation checkpoint and write predicted masks.
    Eval(EvalArgs),
    /// Draw mIoU and loss curves from metrics CSV files as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for img_NNNN.pgm, mask_NNNN.pgm and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 50)]
    pub count: usize,
    /// Side length of the square images in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Number of phases (at least 2).
    #[arg(long, default_value_t = 2)]
    pub phases: usize,
    /// Number of Voronoi grains per image.
    #[arg(long, default_value_t = 16)]
    pub grains: usize,
    /// Standard deviation of Gaussian pixel noise in gray levels.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Phase whose grains carry lamellar stripes.
    #[arg(long)]
    pub stripe_phase: Option<usize>,
    /// Stripe period in pixels.
    #[arg(long, default_value_t = 6.0)]
    pub stripe_period: f64,
    /// Lowest phase intensity.
    #[arg(long, default_value_t = 40)]
    pub intensity_min: u8,
    /// Highest phase intensity.
    #[arg(long, default_value_t = 200)]
    pub intensity_max: u8,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PatchifyArgs {
    /// Directory of .pgm/.ppm images (mask_* files are skipped).
    #[arg(long)]
    pub input: PathBuf,
    /// Manifest file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Patch side length in pixels.
    #[arg(long, default_value_t = 256)]
    pub patch: usize,
    /// Overlap rate between neighbouring windows, in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    pub overlap: f64,
    /// Fraction of source images assigned to the train split.
    #[arg(long, default_value_t = 0.8)]
    pub split_ratio: f64,
    /// Split seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tag every patch as unlabeled instead of splitting.
    #[arg(long)]
    pub unlabeled: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Encoder initialization: "random" or a checkpoint path (overrides init.encoder).
    #[arg(long)]
    pub encoder_init: Option<String>,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed (overrides train.seed).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Segmentation checkpoint written by finetune.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Patch manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of source images.
    #[arg(long)]
    pub image_dir: PathBuf,
    /// Directory of ground-truth masks (defaults to the image directory).
    #[arg(long)]
    pub mask_dir: Option<PathBuf>,
    /// Directory of predicted masks to score instead of running the model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Manifest split to evaluate.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Output directory for the report and predicted masks.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Metrics CSV files, one series each.
    #[arg(required = true)]
    pub csv: Vec<PathBuf>,
    /// SVG file to write.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Patchify(a) => commands::patchify(&a),
        Command::PretrainSource(a) => commands::train(matssl::train::Phase::SourcePretrain, &a),
        Command::Ssl(a) => commands::train(matssl::train::Phase::Ssl, &a),
        Command::Finetune(a) => commands::train(matssl::train::Phase::Finetune, &a),
        Command::Eval(a) => commands::eval(&a),
        Command::Plot(a) => plot::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
