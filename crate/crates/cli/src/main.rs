//! `neumat`: generate training data, train, render, evaluate and inspect
//! multi-resolution neural materials.
//!
//! Exit codes: 0 success, 2 bad input or usage, 3 internal failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "neumat", version, about = "Multi-resolution neural materials", args_override_self = true)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Ordered reductions everywhere. Reductions are already ordered, so
    /// output does not depend on the thread count either way.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Key-value file with default flag values; flags given on the command
    /// line take precedence. Keys are long flag names.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample training queries from a heightfield.
    Generate(GenerateArgs),
    /// Fit a material to a query dataset.
    Train(TrainArgs),
    /// Render a scene with a trained material.
    Render(RenderArgs),
    /// Dataset MSE and per-level error table.
    Eval(EvalArgs),
    /// Print material header, parameter counts and texture statistics.
    Inspect(InspectArgs),
}

/// Heightfield source: a built-in preset or PNG maps.
#[derive(Args, Debug, Clone)]
pub struct HeightfieldArgs {
    /// Built-in microgeometry: flat, step, ramp, checker, bumps.
    #[arg(long, conflicts_with = "heights")]
    preset: Option<String>,
    /// 16-bit (or 8-bit) grayscale height map.
    #[arg(long, value_name = "PNG")]
    heights: Option<PathBuf>,
    /// 8-bit sRGB albedo map (default: grey 0.5).
    #[arg(long, value_name = "PNG", requires = "heights")]
    albedo: Option<PathBuf>,
    /// Height of a full-scale PNG value, in tile units.
    #[arg(long, default_value_t = 0.05)]
    height_scale: f64,
    /// Preset heightfield resolution (default: 2^k).
    #[arg(long, value_name = "N")]
    hf_resolution: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    hf: HeightfieldArgs,
    /// Finest pyramid level; the finest texture has 2^k texels per side.
    #[arg(long, default_value_t = 6)]
    k: usize,
    /// Queries per finest-level texel.
    #[arg(long, default_value_t = neumat::datagen::DEFAULT_PER_TEXEL)]
    per_texel: usize,
    /// Reference samples per query.
    #[arg(long, default_value_t = neumat::datagen::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Half-angle of the light cone, degrees (0 = point light).
    #[arg(long, default_value_t = neumat::datagen::oracle::DEFAULT_LIGHT_CONE_DEG)]
    light_cone: f64,
    /// Add one interreflection bounce inside the microgeometry.
    #[arg(long)]
    indirect: bool,
    /// Silence the per-texel range warning.
    #[arg(long)]
    force: bool,
    /// Output dataset (.mbtfq).
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training dataset (.mbtfq).
    dataset: PathBuf,
    /// Output material (.neumat).
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 30_000)]
    iters: usize,
    #[arg(long, default_value_t = 1 << 14)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Latent channels of the pyramid textures.
    #[arg(long, default_value_t = 7)]
    channels: usize,
    /// Latent channels of the offset texture.
    #[arg(long, default_value_t = 7)]
    offset_channels: usize,
    /// Initial training blur in texels.
    #[arg(long, default_value_t = neumat::trainer::DEFAULT_BLUR_SIGMA)]
    blur_sigma: f64,
    /// Iterations for the training blur to halve.
    #[arg(long, default_value_t = neumat::trainer::DEFAULT_BLUR_HALF_LIFE)]
    half_life: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train without the neural offset.
    #[arg(long)]
    baseline: bool,
    /// Loss log path (default: output with extension `loss.tsv`).
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Write `<output stem>.iterN.neumat` and `.nopt` every N iterations.
    #[arg(long, value_name = "N")]
    checkpoint_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Scene description file.
    #[arg(long)]
    scene: PathBuf,
    /// Material (overrides the scene's `material` key).
    #[arg(long)]
    material: Option<PathBuf>,
    /// Output image; `.pfm` for linear float, `.png` for 8-bit sRGB.
    #[arg(short, long)]
    output: PathBuf,
    /// Also render the heightfield reference and print the image MSE.
    #[arg(long)]
    reference: bool,
    #[command(flatten)]
    hf: HeightfieldArgs,
    /// Reference samples per pixel sample.
    #[arg(long, default_value_t = neumat::datagen::DEFAULT_SAMPLES)]
    ref_samples: usize,
    /// Half-angle of the reference light cone, degrees.
    #[arg(long, default_value_t = neumat::datagen::oracle::DEFAULT_LIGHT_CONE_DEG)]
    light_cone: f64,
    /// Render N images at doubling camera distances.
    #[arg(long, value_name = "N")]
    lod_sweep: Option<usize>,
    /// Override the scene's samples per pixel.
    #[arg(long)]
    spp: Option<usize>,
    /// Override the scene's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Material queries shaded per batch.
    #[arg(long, default_value_t = neumat::render::DEFAULT_BATCH)]
    batch: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Material to evaluate.
    #[arg(long)]
    material: PathBuf,
    /// Dataset for the dataset MSE (e.g. a held-out set).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Heightfield for the per-level table.
    #[command(flatten)]
    hf: HeightfieldArgs,
    /// Comma-separated levels (default: all).
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<usize>>,
    /// Grid side of the per-level images.
    #[arg(long, default_value_t = 32)]
    lod_resolution: usize,
    /// Light/view pairs per level.
    #[arg(long, default_value_t = 4)]
    directions: usize,
    /// Reference samples per pixel.
    #[arg(long, default_value_t = 256)]
    ref_samples: usize,
    #[arg(long, default_value_t = neumat::datagen::oracle::DEFAULT_LIGHT_CONE_DEG)]
    light_cone: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the per-level table as CSV (`level,sigma,mse`).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    material: PathBuf,
    /// View direction `x,y` for an offset visualization; repeatable.
    #[arg(long, value_name = "X,Y", allow_hyphen_values = true)]
    offset_vis: Vec<String>,
    /// Colour gain for the offset visualization.
    #[arg(long, default_value_t = 10.0)]
    offset_scale: f64,
    /// Output prefix for offset PNGs (default: next to the material).
    #[arg(long)]
    vis_prefix: Option<PathBuf>,
}

/// Error carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        let code = match error.downcast_ref::<neumat::Error>() {
            Some(neumat::Error::NonFiniteLoss { .. }) => 3,
            _ => 2,
        };
        Failure { code, error }
    }
}

pub fn internal(msg: impl std::fmt::Display) -> Failure {
    Failure {
        code: 3,
        error: anyhow::anyhow!("internal error: {msg}"),
    }
}

fn run() -> Result<(), Failure> {
    let argv: Vec<std::ffi::OsString> = std::env::args_os().collect();
    let cli = match config::parse_with_config(argv) {
        Ok(cli) => cli,
        Err(config::ParseError::Clap(e)) => e.exit(),
        Err(config::ParseError::Config(e)) => return Err(e.into()),
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(anyhow::anyhow!("--threads must be at least 1").into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| internal(e))?;
    }
    match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Render(a) => commands::render(a),
        Command::Eval(a) => commands::eval(a),
        Command::Inspect(a) => commands::inspect(a),
    }
}

fn main() -> ExitCode {
    match std::panic::catch_unwind(run) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
        Err(_) => ExitCode::from(3),
    }
}
