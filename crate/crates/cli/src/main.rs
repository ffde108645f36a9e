//! `scalesplat`: pose refinement and Gaussian-splat training from the command line.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scalesplat::gradcheck::GradCheckConfig;

use commands::{NoiseOverride, RenderTarget, SynthOptions};
use config::Config;
use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "scalesplat", version, about, after_help = config::keys_help())]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Interpolate camera pose priors from a LiDAR trajectory and write them as TUM.
    #[command(after_help = config::keys_help())]
    Interpolate(InterpolateArgs),
    /// Refine a COLMAP model with pose priors and relative constraints.
    #[command(after_help = config::keys_help())]
    RefinePoses(RefineArgs),
    /// Train a Gaussian scene on posed images and normal maps.
    #[command(after_help = config::keys_help())]
    Train(TrainArgs),
    /// Render a PLY scene to color, normal and alpha buffers.
    #[command(after_help = config::keys_help())]
    Render(RenderArgs),
    /// Compare every analytic Jacobian and gradient against finite differences.
    #[command(after_help = config::keys_help())]
    CheckGradients(CheckArgs),
    /// Generate a synthetic dataset.
    #[command(after_help = config::keys_help())]
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct RigArgs {
    /// LiDAR trajectory (TUM).
    #[arg(long, value_name = "FILE")]
    trajectory: Option<PathBuf>,
    /// lidar <- camera extrinsic file.
    #[arg(long, value_name = "FILE")]
    extrinsic: Option<PathBuf>,
    /// Image timestamps file.
    #[arg(long, value_name = "FILE")]
    camera_times: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[command(flatten)]
    rig: RigArgs,
    /// Output TUM file.
    #[arg(long, short, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RefineArgs {
    #[command(flatten)]
    rig: RigArgs,
    /// COLMAP text model directory.
    #[arg(long, value_name = "DIR")]
    colmap: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Solve without pose priors.
    #[arg(long)]
    no_priors: bool,
    /// Solve without relative-pose constraints.
    #[arg(long)]
    no_relatives: bool,
    /// LM iterations per round.
    #[arg(long, value_name = "N")]
    max_iterations: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// COLMAP text model directory.
    #[arg(long, value_name = "DIR")]
    colmap: Option<PathBuf>,
    /// Directory of training images.
    #[arg(long, value_name = "DIR")]
    images: Option<PathBuf>,
    /// Directory of normal maps.
    #[arg(long, value_name = "DIR")]
    normals: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, value_name = "DIR")]
    output: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "N")]
    snapshot_every: Option<usize>,
    #[arg(long, value_name = "N")]
    holdout_every: Option<usize>,
    /// Disable the scale, normal and smoothness terms.
    #[arg(long)]
    no_normal: bool,
    /// Disable the effective-rank term.
    #[arg(long)]
    no_shape: bool,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Scene PLY file.
    #[arg(long, value_name = "FILE")]
    scene: PathBuf,
    /// COLMAP model providing the camera of `--image`.
    #[arg(long, value_name = "DIR")]
    colmap: Option<PathBuf>,
    /// Render from this model image.
    #[arg(long, value_name = "NAME", conflicts_with_all = ["camera", "pose"])]
    image: Option<String>,
    /// Intrinsics `fx fy cx cy width height`.
    #[arg(long, num_args = 6, value_names = ["FX", "FY", "CX", "CY", "W", "H"], allow_negative_numbers = true, requires = "pose")]
    camera: Option<Vec<f64>>,
    /// camera -> world pose `tx ty tz qx qy qz qw`.
    #[arg(long, num_args = 7, value_names = ["TX", "TY", "TZ", "QX", "QY", "QZ", "QW"], allow_negative_numbers = true, requires = "camera")]
    pose: Option<Vec<f64>>,
    /// Output directory.
    #[arg(long, short, value_name = "DIR")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Random configurations per Jacobian block.
    #[arg(long, value_name = "N")]
    samples: Option<usize>,
    /// Random scenes for the renderer and loss checks.
    #[arg(long, value_name = "N")]
    scenes: Option<usize>,
    /// Also write the results as JSON.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    #[arg(long, hide = true, value_name = "BLOCK")]
    corrupt: Option<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// circle_room, corridor or planar_board.
    #[arg(long)]
    world: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Exact observations and priors.
    #[arg(long, conflicts_with_all = ["sigma_pixel", "sigma_prior_t", "sigma_prior_r_deg"])]
    zero_noise: bool,
    /// Pixel noise, pixels.
    #[arg(long)]
    sigma_pixel: Option<f64>,
    /// Odometry translation noise, metres.
    #[arg(long)]
    sigma_prior_t: Option<f64>,
    /// Odometry rotation noise, degrees.
    #[arg(long)]
    sigma_prior_r_deg: Option<f64>,
    /// Skip rendering images and normal maps.
    #[arg(long)]
    no_images: bool,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, v: Option<PathBuf>) {
    if v.is_some() {
        *slot = v;
    }
}

fn apply_rig(cfg: &mut Config, rig: RigArgs) {
    set_path(&mut cfg.paths.trajectory, rig.trajectory);
    set_path(&mut cfg.paths.extrinsic, rig.extrinsic);
    set_path(&mut cfg.paths.camera_times, rig.camera_times);
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    match cli.command {
        Command::Interpolate(a) => {
            apply_rig(&mut cfg, a.rig);
            set_path(&mut cfg.paths.output, a.output);
            commands::interpolate(&cfg)
        }
        Command::RefinePoses(a) => {
            apply_rig(&mut cfg, a.rig);
            set_path(&mut cfg.paths.colmap, a.colmap);
            set_path(&mut cfg.paths.output, a.output);
            if a.no_priors {
                cfg.constraints.use_priors = false;
            }
            if a.no_relatives {
                cfg.constraints.use_relatives = false;
            }
            set(&mut cfg.solver.max_iterations, a.max_iterations);
            commands::refine_poses(&cfg)
        }
        Command::Train(a) => {
            set_path(&mut cfg.paths.colmap, a.colmap);
            set_path(&mut cfg.paths.images, a.images);
            set_path(&mut cfg.paths.normals, a.normals);
            set_path(&mut cfg.paths.output, a.output);
            set(&mut cfg.train.iterations, a.iterations);
            set(&mut cfg.seed, a.seed);
            set(&mut cfg.train.snapshot_every, a.snapshot_every);
            set(&mut cfg.train.holdout_every, a.holdout_every);
            if a.no_normal {
                cfg.loss.lambda_scale = 0.0;
                cfg.loss.lambda_normal = 0.0;
                cfg.loss.lambda_smooth = 0.0;
            }
            if a.no_shape {
                cfg.loss.lambda_en = 0.0;
            }
            commands::train(&cfg)
        }
        Command::Render(a) => {
            set_path(&mut cfg.paths.colmap, a.colmap);
            set_path(&mut cfg.paths.output, a.output);
            let target = match (a.image, a.camera, a.pose) {
                (Some(name), _, _) => RenderTarget::Image(name),
                (None, Some(c), Some(p)) => RenderTarget::Explicit {
                    camera: c.try_into().expect("clap enforces 6 values"),
                    pose: p.try_into().expect("clap enforces 7 values"),
                },
                _ => return Err(CliError::Input("give either --image or both --camera and --pose".into())),
            };
            commands::render_cmd(&cfg, &a.scene, &target)
        }
        Command::CheckGradients(a) => {
            set(&mut cfg.seed, a.seed);
            let mut gc = GradCheckConfig {
                seed: cfg.seed,
                corrupt: a.corrupt,
                ..Default::default()
            };
            set(&mut gc.samples, a.samples);
            set(&mut gc.scenes, a.scenes);
            commands::check_gradients(&gc, a.report.as_deref())
        }
        Command::Synth(a) => {
            set_path(&mut cfg.paths.output, a.output);
            let sigmas = [a.sigma_pixel, a.sigma_prior_t, a.sigma_prior_r_deg];
            for v in sigmas.iter().flatten() {
                if !(*v >= 0.0 && v.is_finite()) {
                    return Err(CliError::Input(format!("noise sigma must be finite and >= 0, got {v}")));
                }
            }
            let noise = if a.zero_noise {
                NoiseOverride::Zero
            } else {
                NoiseOverride::Sigmas(sigmas)
            };
            let opts = SynthOptions {
                world: a.world,
                seed: a.seed.unwrap_or(cfg.seed),
                noise,
                render: !a.no_images,
            };
            commands::synth_cmd(&cfg, &opts)
        }
    }
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("SCALESPLAT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Input(format!("SCALESPLAT_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Input(format!("cannot start {n} threads: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
