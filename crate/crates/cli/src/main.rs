mod commands;
mod raster;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tp4d_core::Error;

/// Triplane rendering, gradient checks and two-stage reenactment training.
#[derive(Debug, Parser)]
#[command(name = "tp4d", version)]
struct Cli {
    /// Worker threads; defaults to every available core.
    #[arg(long, global = true, env = "TP4D_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a triplane and decoder from one camera.
    Render(RenderArgs),
    /// Run the finite-difference gradient checks.
    CheckGrad(CheckGradArgs),
    /// Train the 3D synthesizer (stage 1) or the reenactment model (stage 2).
    Train(TrainArgs),
    /// Turn a directory of frames into pseudo multi-view fans.
    MakeDataset(DatasetArgs),
    /// Draw cameras from the pose distribution.
    SampleCameras(CameraArgs),
    /// Write a procedural head scene with its frames.
    MakeScene(SceneArgs),
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub triplane: PathBuf,
    #[arg(long)]
    pub decoder: PathBuf,
    #[arg(long)]
    pub camera: PathBuf,
    /// Optional rotation field applied before the triplane lookup.
    #[arg(long)]
    pub deform: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Neural rendering resolution.
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = tp4d_core::volume_render::DEFAULT_UPSAMPLE_FACTOR)]
    pub upsample: usize,
    #[arg(long, default_value_t = tp4d_core::volume_render::DEFAULT_COARSE_SAMPLES)]
    pub coarse: usize,
    #[arg(long, default_value_t = tp4d_core::volume_render::DEFAULT_FINE_SAMPLES)]
    pub fine: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CheckGradArgs {
    /// Comma-separated checks to run; an empty list runs nothing.
    #[arg(long, default_value = "decoder,composite,loss4d")]
    pub cases: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupt a backward pass to confirm the checks catch it.
    #[arg(long, value_parser = ["composite-sigma-sign"])]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML training configuration; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write a checkpoint every this many steps (0 disables).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Stage-1 checkpoint; required for stage 2.
    #[arg(long)]
    pub psi3d: Option<PathBuf>,
    /// Confirm the frozen stage-1 model is bit-identical after stage 2.
    #[arg(long)]
    pub audit: bool,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub psi3d: PathBuf,
    /// Directory of square PNG frames, read in file-name order.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub views: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Decoder for the pseudo views; defaults to the procedural scenes' one.
    #[arg(long)]
    pub decoder: Option<PathBuf>,
    /// Camera distribution TOML; defaults to the built-in ranges.
    #[arg(long)]
    pub distribution: Option<PathBuf>,
    #[arg(long, default_value_t = tp4d_core::training::TOY_RENDER_RESOLUTION)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CameraArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub distribution: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Scene id; every scene is drawn from its own seeded stream.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub frames: usize,
    /// Neural resolution of the written frames (upsampled 4×).
    #[arg(long, default_value_t = tp4d_core::training::TOY_RENDER_RESOLUTION)]
    pub resolution: usize,
}

/// Result of a command that ran to completion.
pub enum Outcome {
    Success,
    /// Ran, but a checked property did not hold.
    ValidationFailed,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Divergence { .. } => 3,
        _ => 2,
    }
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
    let threads = cli.threads.unwrap_or(0);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: cannot start {threads} worker threads: {e}");
        return ExitCode::from(1);
    }
    let result = match &cli.command {
        Command::Render(a) => commands::render(a),
        Command::CheckGrad(a) => commands::check_grad(a),
        Command::Train(a) => commands::train(a),
        Command::MakeDataset(a) => commands::make_dataset(a),
        Command::SampleCameras(a) => commands::sample_cameras(a),
        Command::MakeScene(a) => commands::make_scene(a),
    };
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::ValidationFailed) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
