//! Scene initialisation, the training loop and image metrics.
//!
//! Training is plain first/second-moment adaptive descent over five
//! parameter groups (means, log-scales, rotations, opacity logits and SH
//! coefficients) with a fixed primitive count. One view is used per step;
//! the view order is a seeded permutation redrawn every epoch. Every view
//! whose index is a multiple of [`TrainConfig::holdout_every`] is held out
//! for evaluation.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Vector3, Vector4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_ply;
use crate::lie::Rotation;
use crate::losses::{self, total_loss, LossBreakdown, LossWeights, SupervisionBundle};
use crate::raster::Image;
use crate::splat::{render, GaussianPrimitive, PrimitiveGrad, ViewCamera, PARAMS_PER_PRIMITIVE};

/// Per-group step sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub mean: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            mean: 1.6e-4,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity: 5e-2,
            color: 2.5e-3,
        }
    }
}

impl LearningRates {
    pub fn zero() -> Self {
        Self {
            mean: 0.0,
            log_scale: 0.0,
            rotation: 0.0,
            opacity: 0.0,
            color: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rates: LearningRates,
    pub weights: LossWeights,
    pub seed: u64,
    /// Write a snapshot every this many iterations; 0 disables snapshots.
    pub snapshot_every: usize,
    /// Views with `index % holdout_every == 0` are held out; 0 disables.
    pub holdout_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            learning_rates: LearningRates::default(),
            weights: LossWeights::default(),
            seed: 0,
            snapshot_every: 0,
            holdout_every: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be > 0".into()));
        }
        let lr = &self.learning_rates;
        for (name, v) in [
            ("mean", lr.mean),
            ("log_scale", lr.log_scale),
            ("rotation", lr.rotation),
            ("opacity", lr.opacity),
            ("color", lr.color),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "learning rate {name} must be >= 0, got {v}"
                )));
            }
        }
        self.weights.validate()
    }

    /// Indices of held-out views among `n`. At least one view is always kept
    /// for training.
    pub fn held_out(&self, n: usize) -> Vec<bool> {
        let mut out: Vec<bool> = (0..n)
            .map(|i| self.holdout_every > 0 && i % self.holdout_every == 0)
            .collect();
        if out.iter().all(|&h| h) {
            out.iter_mut().for_each(|h| *h = false);
        }
        out
    }
}

/// A training view: camera and supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainView {
    pub view: ViewCamera,
    pub bundle: SupervisionBundle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub held_out: bool,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub view: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub initial: Vec<ViewMetrics>,
    pub views: Vec<ViewMetrics>,
    pub history: Vec<StepRecord>,
    pub mean_effective_rank: f64,
    pub wall_clock_seconds: f64,
}

impl MetricsReport {
    fn mean(v: &[ViewMetrics], held_out: bool, f: impl Fn(&ViewMetrics) -> f64) -> Option<f64> {
        let xs: Vec<f64> = v.iter().filter(|m| m.held_out == held_out).map(f).collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn train_psnr(&self) -> Option<f64> {
        Self::mean(&self.views, false, |m| m.psnr)
    }

    pub fn test_psnr(&self) -> Option<f64> {
        Self::mean(&self.views, true, |m| m.psnr)
    }

    pub fn test_ssim(&self) -> Option<f64> {
        Self::mean(&self.views, true, |m| m.ssim)
    }

    pub fn initial_train_psnr(&self) -> Option<f64> {
        Self::mean(&self.initial, false, |m| m.psnr)
    }
}

/// Events emitted during training, in order.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Snapshot {
        iteration: usize,
        scene: &'a [GaussianPrimitive],
    },
    Evaluated(&'a ViewMetrics),
}

/// `-10 log10(MSE)`; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    if a.data.is_empty() {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

pub use losses::ssim;

/// Mean effective rank over primitives.
pub fn mean_effective_rank(scene: &[GaussianPrimitive]) -> f64 {
    if scene.is_empty() {
        return 0.0;
    }
    scene
        .iter()
        .map(|g| losses::effective_rank_log(&g.log_scales).0)
        .sum::<f64>()
        / scene.len() as f64
}

/// Options for [`init_scene`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub opacity: f64,
    pub neighbors: usize,
    /// Scale used when a point has no neighbours.
    pub fallback_scale: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            opacity: 0.1,
            neighbors: 3,
            fallback_scale: 0.01,
        }
    }
}

/// One isotropic primitive per colored point, sized by the mean distance to
/// its nearest neighbours.
pub fn init_scene(points: &[(Vector3<f64>, [f64; 3])], cfg: &InitConfig) -> Result<Vec<GaussianPrimitive>> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("cannot initialise a scene from zero points".into()));
    }
    if !(cfg.opacity > 0.0 && cfg.opacity < 1.0) {
        return Err(Error::InvalidArgument(format!("opacity must lie in (0, 1), got {}", cfg.opacity)));
    }
    if points.iter().any(|(p, c)| !p.iter().chain(c.iter()).all(|v| v.is_finite())) {
        return Err(Error::NonFinite("initial point"));
    }
    let k = cfg.neighbors.min(points.len() - 1);
    Ok(points
        .par_iter()
        .enumerate()
        .map(|(i, (p, c))| {
            let scale = if k == 0 {
                cfg.fallback_scale
            } else {
                let mut d: Vec<f64> = points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, (q, _))| (q - p).norm())
                    .collect();
                d.select_nth_unstable_by(k - 1, f64::total_cmp);
                d.sort_unstable_by(f64::total_cmp);
                (d[..k].iter().sum::<f64>() / k as f64).max(1e-7)
            };
            let rgb = [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)];
            GaussianPrimitive::isotropic(*p, scale, cfg.opacity, rgb)
        })
        .collect())
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Updates `params` in place; `lr[i % PARAMS_PER_PRIMITIVE]` is the step
    /// size of each parameter.
    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: &[f64; PARAMS_PER_PRIMITIVE]) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (i, ((p, g), (m, v))) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .enumerate()
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr[i % PARAMS_PER_PRIMITIVE] * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

fn lr_table(lr: &LearningRates) -> [f64; PARAMS_PER_PRIMITIVE] {
    let mut t = [0.0; PARAMS_PER_PRIMITIVE];
    t[0..3].fill(lr.mean);
    t[3..6].fill(lr.log_scale);
    t[6..10].fill(lr.rotation);
    t[10] = lr.opacity;
    t[11..23].fill(lr.color);
    t
}

/// Parameter vector with raw (unit, uncanonicalised) quaternions, so that a
/// sign flip of the stored rotation never reverses the optimiser moments.
fn flatten(scene: &[GaussianPrimitive]) -> Vec<f64> {
    scene.iter().flat_map(|g| g.to_params()).collect()
}

/// Writes the parameters back, renormalising quaternions. Returns the sign
/// relating each stored quaternion to its raw parameters.
fn unflatten(params: &mut [f64], scene: &mut [GaussianPrimitive]) -> Vec<f64> {
    params
        .chunks_mut(PARAMS_PER_PRIMITIVE)
        .zip(scene.iter_mut())
        .map(|(p, g)| {
            let q = Vector4::new(p[6], p[7], p[8], p[9]);
            let n = q.norm();
            let q = if n > 1e-12 { q / n } else { Vector4::new(1.0, 0.0, 0.0, 0.0) };
            p[6..10].copy_from_slice(q.as_slice());
            *g = GaussianPrimitive::from_params(p);
            g.rotation = Rotation::from_wxyz(q[0], q[1], q[2], q[3]);
            let s = g.rotation.wxyz();
            if s[0] * q[0] + s[1] * q[1] + s[2] * q[2] + s[3] * q[3] < 0.0 {
                -1.0
            } else {
                1.0
            }
        })
        .collect()
}

fn evaluate(scene: &[GaussianPrimitive], views: &[TrainView], held_out: &[bool]) -> Result<Vec<ViewMetrics>> {
    views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let color = render(scene, &v.view).color;
            Ok(ViewMetrics {
                view: i,
                held_out: held_out[i],
                psnr: psnr(&color, &v.bundle.rgb)?,
                ssim: ssim(&color, &v.bundle.rgb)?,
            })
        })
        .collect()
}

pub fn train(
    scene: &[GaussianPrimitive],
    views: &[TrainView],
    cfg: &TrainConfig,
) -> Result<(Vec<GaussianPrimitive>, MetricsReport)> {
    train_with(scene, views, cfg, |_| Ok(()))
}

/// Trains `scene` on `views`, reporting progress through `on_event`.
pub fn train_with(
    scene: &[GaussianPrimitive],
    views: &[TrainView],
    cfg: &TrainConfig,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<(Vec<GaussianPrimitive>, MetricsReport)> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one view".into()));
    }
    let start = Instant::now();
    let held_out = cfg.held_out(views.len());
    let train_ids: Vec<usize> = (0..views.len()).filter(|&i| !held_out[i]).collect();
    let initial = evaluate(scene, views, &held_out)?;

    let mut scene = scene.to_vec();
    let mut params = flatten(&scene);
    let mut signs = unflatten(&mut params, &mut scene);
    let lr = lr_table(&cfg.learning_rates);
    let mut adam = Adam::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut grads = vec![0.0; params.len()];

    for it in 1..=cfg.iterations {
        if order.is_empty() {
            order = train_ids.clone();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let vi = order.pop().expect("refilled");
        let v = &views[vi];
        let buffers = render(&scene, &v.view);
        let (loss, g) = total_loss(&scene, &v.view, &buffers, &v.bundle, &cfg.weights)?;
        if let Some(term) = loss.non_finite_term() {
            return Err(Error::NonFiniteLoss {
                term: term.to_string(),
                iteration: it,
            });
        }
        for ((dst, gp), s) in grads.chunks_mut(PARAMS_PER_PRIMITIVE).zip(&g).zip(&signs) {
            let mut gp: PrimitiveGrad = gp.clone();
            gp.rotation *= *s;
            dst.copy_from_slice(&gp.to_params());
        }
        if let Some(bad) = grads.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteLoss {
                term: format!("gradient of primitive {}", bad / PARAMS_PER_PRIMITIVE),
                iteration: it,
            });
        }
        adam.update(&mut params, &grads, &lr);
        signs = unflatten(&mut params, &mut scene);

        let rec = StepRecord {
            iteration: it,
            view: vi,
            loss,
        };
        on_event(TrainEvent::Step(&rec))?;
        history.push(rec);
        if cfg.snapshot_every > 0 && (it % cfg.snapshot_every == 0 || it == cfg.iterations) {
            on_event(TrainEvent::Snapshot {
                iteration: it,
                scene: &scene,
            })?;
        }
    }

    let final_metrics = evaluate(&scene, views, &held_out)?;
    for m in &final_metrics {
        on_event(TrainEvent::Evaluated(m))?;
    }
    let report = MetricsReport {
        initial,
        views: final_metrics,
        history,
        mean_effective_rank: mean_effective_rank(&scene),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((scene, report))
}

/// Writes training events to `metrics.jsonl` and `snapshots/iter_NNNNNN.ply`
/// under a directory. Wall-clock time is never logged, so identical runs
/// produce identical files.
pub struct RunLogger {
    dir: PathBuf,
    metrics: fs::File,
}

impl RunLogger {
    pub fn create(dir: &Path) -> Result<Self> {
        let snaps = dir.join("snapshots");
        fs::create_dir_all(&snaps).map_err(|e| Error::io(&snaps, e))?;
        let path = dir.join("metrics.jsonl");
        let metrics = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
        })
    }

    pub fn snapshot_path(&self, iteration: usize) -> PathBuf {
        self.dir.join("snapshots").join(format!("iter_{iteration:06}.ply"))
    }

    fn line(&mut self, value: serde_json::Value) -> Result<()> {
        let path = self.dir.join("metrics.jsonl");
        writeln!(self.metrics, "{value}").map_err(|e| Error::io(&path, e))
    }

    pub fn handle(&mut self, ev: TrainEvent<'_>) -> Result<()> {
        match ev {
            TrainEvent::Step(r) => self.line(serde_json::json!({
                "type": "step",
                "iteration": r.iteration,
                "view": r.view,
                "img": r.loss.img,
                "erank": r.loss.erank,
                "scale": r.loss.scale,
                "normal": r.loss.normal,
                "smooth": r.loss.smooth,
                "total": r.loss.total,
            })),
            TrainEvent::Snapshot { iteration, scene } => {
                write_ply(&self.snapshot_path(iteration), scene)?;
                self.line(serde_json::json!({"type": "snapshot", "iteration": iteration}))
            }
            TrainEvent::Evaluated(m) => self.line(serde_json::json!({
                "type": "eval",
                "view": m.view,
                "held_out": m.held_out,
                "psnr": if m.psnr.is_finite() { serde_json::json!(m.psnr) } else { serde_json::json!("inf") },
                "ssim": m.ssim,
            })),
        }
    }
}
