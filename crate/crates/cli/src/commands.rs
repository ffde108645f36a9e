use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::Vector3;

use scalesplat::gradcheck::{run_all, GradCheckConfig};
use scalesplat::io::{self, ColmapModel};
use scalesplat::lie::SE3Pose;
use scalesplat::losses::SupervisionBundle;
use scalesplat::optim::{init_scene, mean_effective_rank, train_with, MetricsReport, RunLogger, TrainView};
use scalesplat::posegraph::{solve, Camera, RelativeMeasurement};
use scalesplat::splat::{render, RenderBuffers, ViewCamera};
use scalesplat::synth::{self, NoiseParams, ObserveOptions};
use scalesplat::traj::{camera_priors, isotropic_information, load_trajectory, save_tum, PosePrior};
use scalesplat::Rotation;

use crate::config::{output, require, Config};
use crate::error::{CliError, CliResult};

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numeric(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| scalesplat::Error::io(path, e).into())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| scalesplat::Error::io(dir, e).into())
}

/// Camera priors for every image with a timestamp, keyed by image index.
fn image_priors(cfg: &Config, names: &[&str]) -> CliResult<Vec<PosePrior>> {
    let traj = load_trajectory(&require(&cfg.paths.trajectory, "trajectory file", "--trajectory")?)?;
    let ext = io::load_extrinsic(&require(&cfg.paths.extrinsic, "extrinsic file", "--extrinsic")?)?;
    let times = io::load_camera_times(&require(&cfg.paths.camera_times, "camera times file", "--camera-times")?)?;
    let by_name: HashMap<&str, f64> = times.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    let mut pairs = Vec::new();
    for (k, name) in names.iter().enumerate() {
        match by_name.get(name) {
            Some(t) => pairs.push((k, *t)),
            None => warn!("image {name} has no timestamp; no prior"),
        }
    }
    let (priors, dropped) = camera_priors(&traj, &ext, &pairs)?;
    for k in dropped {
        warn!("image {} lies outside the trajectory; no prior", names[k]);
    }
    Ok(priors)
}

fn by_time(priors: &[PosePrior]) -> Vec<PosePrior> {
    let mut v = priors.to_vec();
    v.sort_by(|a, b| a.pose.timestamp.partial_cmp(&b.pose.timestamp).unwrap());
    v
}

pub fn interpolate(cfg: &Config) -> CliResult<()> {
    let out = output(&cfg.paths.output)?;
    let times = io::load_camera_times(&require(&cfg.paths.camera_times, "camera times file", "--camera-times")?)?;
    let names: Vec<&str> = times.iter().map(|(n, _)| n.as_str()).collect();
    let priors = by_time(&image_priors(cfg, &names)?);
    let poses: Vec<SE3Pose> = priors.iter().map(|p| p.pose).collect();
    save_tum(&out, &poses)?;
    println!("wrote {} camera priors to {}", poses.len(), out.display());
    Ok(())
}

pub fn refine_poses(cfg: &Config) -> CliResult<()> {
    let out = output(&cfg.paths.output)?;
    let mut model = ColmapModel::read(&require(&cfg.paths.colmap, "COLMAP model", "--colmap")?)?;
    let mut problem = model.to_problem();
    let c = &cfg.constraints;
    let names: Vec<&str> = model.images.iter().map(|i| i.name.as_str()).collect();
    let mut timed = Vec::new();
    if c.use_priors || c.use_relatives {
        let priors = image_priors(cfg, &names)?;
        if c.use_priors {
            problem.priors = priors
                .iter()
                .map(|p| PosePrior::with_weights(p.camera_id, p.pose, c.prior_rotation_weight, c.prior_translation_weight))
                .collect();
        }
        timed = by_time(&priors);
        if c.use_relatives {
            let info = isotropic_information(c.relative_rotation_weight, c.relative_translation_weight);
            for w in timed.windows(2) {
                problem.relatives.push(RelativeMeasurement::between(
                    w[0].camera_id,
                    w[1].camera_id,
                    &w[0].pose,
                    &w[1].pose,
                    info,
                )?);
            }
        }
    }
    if problem.priors.is_empty() {
        problem.fix_gauge();
    }
    problem.validate()?;
    let sol = solve(&problem, &cfg.solver)?;
    model.update(&sol.poses, &sol.landmarks)?;

    create_dir(&out)?;
    model.write(&out.join("sparse"))?;
    let refined: Vec<SE3Pose> = timed
        .iter()
        .map(|p| SE3Pose { timestamp: p.pose.timestamp, ..sol.poses[p.camera_id] })
        .collect();
    save_tum(&out.join("poses.tum"), &refined)?;
    write_json(&out.join("report.json"), &sol.report)?;

    let r = &sol.report;
    println!("termination      {:?}", r.termination);
    println!("iterations       {}", r.iterations);
    println!("initial cost     {:.6e}", r.initial_cost.total);
    println!(
        "final cost       {:.6e} (prior {:.3e}, relative {:.3e}, reprojection {:.3e})",
        r.final_cost.total, r.final_cost.prior, r.final_cost.relative, r.final_cost.reprojection
    );
    println!("outliers removed {}", r.observations_removed);
    if !r.converged {
        return Err(CliError::NotConverged(format!(
            "solver stopped without converging ({:?}); best iterate written to {}",
            r.termination,
            out.display()
        )));
    }
    Ok(())
}

fn normal_map_path(dir: &Path, name: &str) -> CliResult<PathBuf> {
    let stem = Path::new(name).with_extension("");
    for ext in ["pfm", "png"] {
        let p = dir.join(stem.with_extension(ext));
        if p.exists() {
            return Ok(p);
        }
    }
    Err(CliError::missing("normal map", &dir.join(stem.with_extension("pfm"))))
}

fn view_of(model: &ColmapModel, image: usize) -> CliResult<ViewCamera> {
    let img = &model.images[image];
    Ok(ViewCamera::new(model.cameras[&img.camera_id].camera, img.world_to_camera)?)
}

/// Metrics without wall-clock time, so reruns produce identical files.
#[derive(serde::Serialize)]
struct TrainSummary<'a> {
    initial: &'a [scalesplat::optim::ViewMetrics],
    views: &'a [scalesplat::optim::ViewMetrics],
    train_psnr: Option<f64>,
    test_psnr: Option<f64>,
    test_ssim: Option<f64>,
    mean_effective_rank: f64,
    primitives: usize,
}

fn print_table(report: &MetricsReport, names: &[&str]) {
    println!("{:<24} {:>9} {:>10} {:>8}", "view", "split", "PSNR (dB)", "SSIM");
    for m in &report.views {
        let split = if m.held_out { "test" } else { "train" };
        println!("{:<24} {:>9} {:>10.3} {:>8.4}", names[m.view], split, m.psnr, m.ssim);
    }
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    println!("train PSNR {} dB, test PSNR {} dB, test SSIM {}", fmt(report.train_psnr()), fmt(report.test_psnr()), fmt(report.test_ssim()));
    println!("mean effective rank {:.4}", report.mean_effective_rank);
    println!("wall clock {:.1} s", report.wall_clock_seconds);
}

pub fn train(cfg: &Config) -> CliResult<()> {
    let out = output(&cfg.paths.output)?;
    let model = ColmapModel::read(&require(&cfg.paths.colmap, "COLMAP model", "--colmap")?)?;
    let images = require(&cfg.paths.images, "image directory", "--images")?;
    let normals = require(&cfg.paths.normals, "normal map directory", "--normals")?;
    let tc = cfg.train_config();
    tc.validate()?;

    let mut views = Vec::with_capacity(model.images.len());
    for (k, img) in model.images.iter().enumerate() {
        let rgb_path = images.join(&img.name);
        if !rgb_path.exists() {
            return Err(CliError::missing("image", &rgb_path));
        }
        let rgb = io::read_png_rgb(&rgb_path)?;
        let n = io::read_normal_map(&normal_map_path(&normals, &img.name)?)?;
        views.push(TrainView {
            view: view_of(&model, k)?,
            bundle: SupervisionBundle::new(rgb, n)?,
        });
    }
    let points: Vec<(Vector3<f64>, [f64; 3])> = model
        .points
        .iter()
        .map(|p| (p.xyz, p.rgb.map(|c| c as f64 / 255.0)))
        .collect();
    let scene = init_scene(&points, &cfg.init)?;

    let mut logger = RunLogger::create(&out)?;
    let (scene, report) = train_with(&scene, &views, &tc, |ev| logger.handle(ev))?;
    io::write_ply(&out.join("scene.ply"), &scene)?;
    write_json(
        &out.join("summary.json"),
        &TrainSummary {
            initial: &report.initial,
            views: &report.views,
            train_psnr: report.train_psnr(),
            test_psnr: report.test_psnr(),
            test_ssim: report.test_ssim(),
            mean_effective_rank: mean_effective_rank(&scene),
            primitives: scene.len(),
        },
    )?;
    let names: Vec<&str> = model.images.iter().map(|i| i.name.as_str()).collect();
    print_table(&report, &names);
    Ok(())
}

/// Where to render from: a model image, or explicit intrinsics and pose.
pub enum RenderTarget {
    Image(String),
    Explicit { camera: [f64; 6], pose: [f64; 7] },
}

pub fn render_view(cfg: &Config, target: &RenderTarget) -> CliResult<ViewCamera> {
    match target {
        RenderTarget::Image(name) => {
            let model = ColmapModel::read(&require(&cfg.paths.colmap, "COLMAP model", "--colmap")?)?;
            let k = model
                .images
                .iter()
                .position(|i| i.name == *name)
                .ok_or_else(|| CliError::Input(format!("image `{name}` is not in the model")))?;
            view_of(&model, k)
        }
        RenderTarget::Explicit { camera: c, pose: p } => {
            for (v, what) in [(c[4], "width"), (c[5], "height")] {
                if !(v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64) {
                    return Err(CliError::Input(format!("camera {what} must be a positive integer, got {v}")));
                }
            }
            let camera = Camera::new(c[0], c[1], c[2], c[3], c[4] as u32, c[5] as u32)?;
            if !p.iter().all(|v| v.is_finite()) || p[3..].iter().all(|v| *v == 0.0) {
                return Err(CliError::Input("pose needs finite values and a nonzero quaternion".into()));
            }
            let pose = SE3Pose::new(Rotation::from_wxyz(p[6], p[3], p[4], p[5]), Vector3::new(p[0], p[1], p[2]));
            Ok(ViewCamera::from_pose(camera, &pose)?)
        }
    }
}

/// Writes `color.png`, `color.pfm`, `normal.pfm` and `alpha.pfm`.
pub fn write_buffers(dir: &Path, b: &RenderBuffers) -> CliResult<()> {
    create_dir(dir)?;
    io::write_png_rgb(&dir.join("color.png"), &b.color)?;
    io::write_pfm(&dir.join("color.pfm"), &b.color)?;
    io::write_pfm(&dir.join("normal.pfm"), &b.normal)?;
    io::write_pfm(&dir.join("alpha.pfm"), &b.alpha)?;
    Ok(())
}

pub fn render_cmd(cfg: &Config, scene: &Path, target: &RenderTarget) -> CliResult<()> {
    if !scene.exists() {
        return Err(CliError::missing("scene", scene));
    }
    let out = output(&cfg.paths.output)?;
    let scene = io::read_ply(scene)?;
    let view = render_view(cfg, target)?;
    let b = render(&scene, &view);
    write_buffers(&out, &b)?;
    println!(
        "rendered {} primitives at {}x{} to {}",
        scene.len(),
        b.color.width,
        b.color.height,
        out.display()
    );
    Ok(())
}

pub fn check_gradients(gc: &GradCheckConfig, report: Option<&Path>) -> CliResult<()> {
    let results = run_all(gc)?;
    println!("{:<22} {:>8} {:>12} {:>10}  result", "block", "samples", "max error", "tolerance");
    for r in &results {
        println!(
            "{:<22} {:>8} {:>12.3e} {:>10.1e}  {}",
            r.name,
            r.samples,
            r.error,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(p) = report {
        write_json(p, &results)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

pub enum NoiseOverride {
    Zero,
    /// Pixel, prior translation and prior rotation sigmas; `None` keeps the
    /// world's default.
    Sigmas([Option<f64>; 3]),
}

pub struct SynthOptions {
    pub world: String,
    pub seed: u64,
    pub noise: NoiseOverride,
    pub render: bool,
}

pub fn synth_cmd(cfg: &Config, opts: &SynthOptions) -> CliResult<()> {
    let out = output(&cfg.paths.output)?;
    let mut world = synth::make_world_named(&opts.world, opts.seed)?;
    let noise = match opts.noise {
        NoiseOverride::Zero => NoiseParams::zero(),
        NoiseOverride::Sigmas([p, t, r]) => NoiseParams {
            sigma_pixel: p.unwrap_or(world.noise.sigma_pixel),
            sigma_prior_t: t.unwrap_or(world.noise.sigma_prior_t),
            sigma_prior_r_deg: r.unwrap_or(world.noise.sigma_prior_r_deg),
        },
    };
    world = world.with_noise(noise);
    let obs = synth::observe_with(&world, ObserveOptions { render: opts.render })?;
    synth::write_dataset(&world, &obs, &out)?;
    println!(
        "wrote {} world (seed {}, {} images, {} landmarks) to {}",
        world.spec,
        opts.seed,
        world.poses.len(),
        world.landmarks.len(),
        out.display()
    );
    Ok(())
}
