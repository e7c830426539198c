//! `uvhead`: dataset generation, training, reconstruction, refinement,
//! animation, benchmarking and diagnostics.
//!
//! Every verb accepts its flags on the command line or from the matching
//! table of a `--config` TOML file; file values take precedence. All output
//! on stdout is `key=value` lines.

mod commands;
mod config;
mod logging;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "uvhead", version, about = "UV-anchored Gaussian head avatars")]
struct Cli {
    /// TOML file with one table per verb; its values override flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Log level: error, warn, info, debug.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Render a synthetic multi-view, multi-expression dataset.
    Datagen(DatagenArgs),
    /// Train the reconstruction network and the dynamic UNet.
    Train(TrainArgs),
    /// Reconstruct an avatar asset from 1-4 images.
    Reconstruct(ReconstructArgs),
    /// Refine an asset on its input views with the UNet frozen.
    Refine(RefineArgs),
    /// Render an expression sequence along a camera path.
    Animate(AnimateArgs),
    /// Per-stage timings of the drive path.
    Benchmark(BenchmarkArgs),
    /// Finite-difference check of every operation and loss.
    Gradcheck(GradcheckArgs),
    /// Expression PCA of the sampler anchors, as CSV and a scatter PNG.
    PcaPlot(PcaPlotArgs),
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenArgs {
    /// Output directory.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub ids: usize,
    /// Expressions per identity (the first is neutral).
    #[arg(long, default_value_t = 8)]
    pub expressions: usize,
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    #[arg(long, default_value_t = 128)]
    pub image_size: usize,
    #[arg(long, default_value_t = 64)]
    pub uv_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub rig_seed: u64,
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// Dataset directory written by `datagen`.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Run directory for checkpoints and loss.csv.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Network sizes (TOML with [recon] and [unet] tables); defaults if absent.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Start from this model directory instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 3e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 0 disables intermediate checkpoints.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Gradient-norm clip, 0 to disable.
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 1)]
    pub min_inputs: usize,
    #[arg(long, default_value_t = 4)]
    pub max_inputs: usize,
    #[arg(long, default_value_t = 4)]
    pub supervision_views: usize,
    /// Loss weights l1,ssim,lpips,mouth,xyz,scale.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.1, 0.2, 10.0, 0.01, 1.0])]
    pub weights: Vec<f64>,
    /// Held-out `expression:view` pairs, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub held_out: Vec<String>,
    #[arg(long, default_value_t = 20)]
    pub anchors: usize,
    #[arg(long, default_value_t = 6)]
    pub random_per_id: usize,
    #[arg(long, default_value = uvhead::loss::DEFAULT_METRIC)]
    pub metric: String,
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructArgs {
    /// Model directory (model.toml, recon.ckpt, unet.ckpt).
    #[arg(long, default_value = "run/final")]
    pub model: PathBuf,
    /// Rig file the model was trained with.
    #[arg(long, default_value = "data/rig.bin")]
    pub rig: PathBuf,
    /// 1-4 RGB images; `<stem>_mask.png` next to an image is used as its mask.
    #[arg(long, value_delimiter = ',')]
    pub images: Vec<PathBuf>,
    #[arg(long, default_value = "avatar.uvh")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineArgs {
    #[arg(long, default_value = "run/final")]
    pub model: PathBuf,
    #[arg(long, default_value = "data/rig.bin")]
    pub rig: PathBuf,
    #[arg(long, default_value = "avatar.uvh")]
    pub asset: PathBuf,
    /// The asset's input images, in input order.
    #[arg(long, value_delimiter = ',')]
    pub images: Vec<PathBuf>,
    /// One camera per image (camera CSV, no header).
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    /// One expression row per image (expression CSV).
    #[arg(long)]
    pub expressions: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Optimize only the map decoder.
    #[arg(long)]
    pub decoder_only: bool,
    #[arg(long, default_value = "refined.uvh")]
    pub out: PathBuf,
    /// Also write the refined reconstruction weights here.
    #[arg(long)]
    pub out_model: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnimateArgs {
    #[arg(long, default_value = "run/final")]
    pub model: PathBuf,
    #[arg(long, default_value = "data/rig.bin")]
    pub rig: PathBuf,
    #[arg(long, default_value = "avatar.uvh")]
    pub asset: PathBuf,
    /// Expression sequence CSV.
    #[arg(long)]
    pub expressions: Option<PathBuf>,
    /// Camera path CSV: one camera, or one per frame. Without it, a
    /// turntable of `--orbit-frames` views at the neutral expression.
    #[arg(long)]
    pub cameras: Option<PathBuf>,
    #[arg(long, default_value_t = 36)]
    pub orbit_frames: usize,
    #[arg(long, default_value_t = 0.6)]
    pub radius: f64,
    /// Focal length as a multiple of the image size.
    #[arg(long, default_value_t = 2.3)]
    pub focal_frac: f64,
    #[arg(long, default_value = "frames")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkArgs {
    #[arg(long, default_value = "run/final")]
    pub model: PathBuf,
    #[arg(long, default_value = "data/rig.bin")]
    pub rig: PathBuf,
    #[arg(long, default_value = "avatar.uvh")]
    pub asset: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub frames: usize,
    /// Expression CSV; its first row is driven. Neutral when absent.
    #[arg(long)]
    pub expressions: Option<PathBuf>,
    #[arg(long, default_value_t = 0.6)]
    pub radius: f64,
    #[arg(long, default_value_t = 2.3)]
    pub focal_frac: f64,
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// Finite-difference step for operations.
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    /// Finite-difference step for losses, whose longer chains need a larger step.
    #[arg(long, default_value_t = 3e-4)]
    pub loss_eps: f64,
    /// Pass threshold on the max relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Only check these operations or losses.
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<String>,
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaPlotArgs {
    /// Dataset directory (its expressions.csv is used).
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Use this expression table CSV instead of a dataset.
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub anchors: usize,
    #[arg(long, default_value = "pca")]
    pub out: PathBuf,
    /// Scatter plot side in pixels.
    #[arg(long, default_value_t = 512)]
    pub size: usize,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.sequential {
        uvhead::par::set_parallel(false);
    }
    let file = cli.config.as_deref().map(config::load).transpose()?;
    let file = file.as_ref();
    match cli.verb {
        Verb::Datagen(a) => commands::datagen(config::overlay(&a, file, "datagen")?),
        Verb::Train(a) => commands::train(config::overlay(&a, file, "train")?),
        Verb::Reconstruct(a) => commands::reconstruct(config::overlay(&a, file, "reconstruct")?),
        Verb::Refine(a) => commands::refine(config::overlay(&a, file, "refine")?),
        Verb::Animate(a) => commands::animate(config::overlay(&a, file, "animate")?),
        Verb::Benchmark(a) => commands::benchmark(config::overlay(&a, file, "benchmark")?),
        Verb::Gradcheck(a) => commands::gradcheck(config::overlay(&a, file, "gradcheck")?),
        Verb::PcaPlot(a) => commands::pca_plot(config::overlay(&a, file, "pca-plot")?),
    }
}

fn main() {
    let cli = Cli::parse();
    logging::init(&cli.log_level);
    if let Err(e) = run(cli) {
        println!("status=error error={:?}", format!("{e:#}"));
        std::process::exit(1);
    }
}
