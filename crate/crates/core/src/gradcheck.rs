//! Finite-difference verification of every analytic Jacobian and gradient.

use nalgebra::{DMatrix, Matrix6, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lie::{so3_exp, so3_log, so3_right_jacobian_inv, SE3Pose};
use crate::losses::{total_loss, LossWeights, SupervisionBundle};
use crate::posegraph::{
    prior_jacobian, prior_residual, relative_jacobians, relative_residual, reprojection_jacobians,
    reprojection_residual, Camera, RelativeMeasurement,
};
use crate::raster::Image;
use crate::splat::{
    random_scene, render, render_backward, GaussianPrimitive, Upstream, ViewCamera,
    PARAMS_PER_PRIMITIVE,
};
use crate::traj::PosePrior;

/// Names accepted by [`GradCheckConfig::corrupt`].
pub const BLOCKS: &[&str] = &[
    "lie.jr_inv",
    "prior.rotation",
    "prior.translation",
    "relative.d_pi",
    "relative.d_pj",
    "relative.d_ri",
    "relative.d_rj",
    "reprojection.pose",
    "reprojection.point",
    "render.backward",
    "total.mean",
    "total.log_scales",
    "total.rotation",
    "total.opacity",
    "total.sh",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    /// Random configurations per Jacobian suite.
    pub samples: usize,
    /// Random scenes for the renderer and loss suites.
    pub scenes: usize,
    pub jacobian_step: f64,
    pub jacobian_tolerance: f64,
    pub render_step: f64,
    pub loss_step: f64,
    pub gradient_rel_tolerance: f64,
    /// Negates the named analytic block before comparison (self-test).
    pub corrupt: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: 100,
            scenes: 3,
            jacobian_step: 1e-6,
            jacobian_tolerance: 1e-5,
            render_step: 1e-5,
            loss_step: 1e-6,
            gradient_rel_tolerance: 1e-3,
            corrupt: None,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = &self.corrupt {
            if !BLOCKS.contains(&b.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "unknown block `{b}`; expected one of {}",
                    BLOCKS.join(", ")
                )));
            }
        }
        Ok(())
    }

    fn sign(&self, block: &str) -> f64 {
        if self.corrupt.as_deref() == Some(block) {
            -1.0
        } else {
            1.0
        }
    }
}

/// Outcome of one suite. For Jacobians `error` is the max absolute entry
/// error; for gradients it is the max over scenes of the relative error
/// `|g - g_fd| / |g_fd|` of the parameter group.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub samples: usize,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, samples: usize, error: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            samples,
            error,
            tolerance,
            passed: error < tolerance,
        }
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-s..s),
        rng.random_range(-s..s),
        rng.random_range(-s..s),
    )
}

fn rand_pose(rng: &mut ChaCha8Rng) -> SE3Pose {
    SE3Pose::new(
        so3_exp(&rand_vec(rng, 1.5)).expect("finite"),
        rand_vec(rng, 3.0),
    )
}

/// Central differences of `f` under the pose retraction.
fn fd_pose(pose: &SE3Pose, h: f64, rows: usize, f: impl Fn(&SE3Pose) -> Vec<f64>) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(rows, 6);
    for k in 0..6 {
        let mut d = Vector6::zeros();
        d[k] = h;
        let step = |d: Vector6<f64>| {
            pose.retract(&d.fixed_rows::<3>(0).into(), &d.fixed_rows::<3>(3).into())
                .expect("finite step")
        };
        let (p, m) = (f(&step(d)), f(&step(-d)));
        for r in 0..rows {
            j[(r, k)] = (p[r] - m[r]) / (2.0 * h);
        }
    }
    j
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

pub fn check_lie(cfg: &GradCheckConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.jacobian_step;
    let mut worst = 0.0f64;
    for _ in 0..cfg.samples {
        let w = rand_vec(&mut rng, 1.6);
        let r = so3_exp(&w)?;
        let an = so3_right_jacobian_inv(&w)? * cfg.sign("lie.jr_inv");
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = h;
            let p = so3_log(&(r * so3_exp(&d)?));
            let m = so3_log(&(r * so3_exp(&-d)?));
            let col = (p - m) / (2.0 * h);
            worst = worst.max((an.column(k) - col).amax());
        }
    }
    Ok(CheckResult::new("lie.jr_inv", cfg.samples, worst, cfg.jacobian_tolerance))
}

pub fn check_prior(cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let (mut e_rot, mut e_trans) = (0.0f64, 0.0f64);
    for _ in 0..cfg.samples {
        let prior = PosePrior::new(0, rand_pose(&mut rng));
        let pose = prior.pose.retract(&rand_vec(&mut rng, 1.0), &rand_vec(&mut rng, 1.0))?;
        let mut an: DMatrix<f64> = DMatrix::from_column_slice(6, 6, prior_jacobian(&pose, &prior)?.as_slice());
        for r in 0..6 {
            for c in 0..3 {
                an[(r, c)] *= cfg.sign("prior.rotation");
                an[(r, c + 3)] *= cfg.sign("prior.translation");
            }
        }
        let fd = fd_pose(&pose, cfg.jacobian_step, 6, |p| {
            prior_residual(p, &prior).as_slice().to_vec()
        });
        e_rot = e_rot.max(max_abs_diff(&an.columns(0, 3).into_owned(), &fd.columns(0, 3).into_owned()));
        e_trans = e_trans.max(max_abs_diff(&an.columns(3, 3).into_owned(), &fd.columns(3, 3).into_owned()));
    }
    let t = cfg.jacobian_tolerance;
    Ok(vec![
        CheckResult::new("prior.rotation", cfg.samples, e_rot, t),
        CheckResult::new("prior.translation", cfg.samples, e_trans, t),
    ])
}

pub fn check_relative(cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut worst = [0.0f64; 4];
    for _ in 0..cfg.samples {
        let a = rand_pose(&mut rng);
        let b = rand_pose(&mut rng);
        let m = RelativeMeasurement::between(0, 1, &a, &b, Matrix6::identity())?;
        let a2 = a.retract(&rand_vec(&mut rng, 0.8), &rand_vec(&mut rng, 1.0))?;
        let b2 = b.retract(&rand_vec(&mut rng, 0.8), &rand_vec(&mut rng, 1.0))?;
        let j = relative_jacobians(&a2, &b2, &m)?;
        let fd_i = fd_pose(&a2, cfg.jacobian_step, 6, |p| {
            relative_residual(p, &b2, &m).as_slice().to_vec()
        });
        let fd_j = fd_pose(&b2, cfg.jacobian_step, 6, |p| {
            relative_residual(&a2, p, &m).as_slice().to_vec()
        });
        let blocks = [
            (&j.d_pi, &fd_i, 3, "relative.d_pi"),
            (&j.d_pj, &fd_j, 3, "relative.d_pj"),
            (&j.d_ri, &fd_i, 0, "relative.d_ri"),
            (&j.d_rj, &fd_j, 0, "relative.d_rj"),
        ];
        for (k, (an, fd, col, name)) in blocks.into_iter().enumerate() {
            let an = DMatrix::from_column_slice(6, 3, an.as_slice()) * cfg.sign(name);
            worst[k] = worst[k].max(max_abs_diff(&an, &fd.columns(col, 3).into_owned()));
        }
    }
    let t = cfg.jacobian_tolerance;
    Ok(["relative.d_pi", "relative.d_pj", "relative.d_ri", "relative.d_rj"]
        .iter()
        .zip(worst)
        .map(|(n, e)| CheckResult::new(n, cfg.samples, e, t))
        .collect())
}

pub fn check_reprojection(cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let cam = Camera::new(100.0, 100.0, 32.0, 24.0, 64, 48)?;
    let h = cfg.jacobian_step;
    let (mut e_pose, mut e_point) = (0.0f64, 0.0f64);
    for _ in 0..cfg.samples {
        let pose = rand_pose(&mut rng);
        let local = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(1.0..5.0),
        );
        let x = pose.transform_point(&local);
        let uv = Vector2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..48.0));
        let (jp, jl) = reprojection_jacobians(&pose, &cam, &x)
            .ok_or_else(|| Error::Numeric("sample point behind camera".into()))?;
        let res = |p: &SE3Pose, x: &Vector3<f64>| {
            reprojection_residual(p, &cam, x, &uv).expect("in front")
        };
        let fd = fd_pose(&pose, h, 2, |p| res(p, &x).as_slice().to_vec());
        let an = DMatrix::from_column_slice(2, 6, jp.as_slice()) * cfg.sign("reprojection.pose");
        e_pose = e_pose.max(max_abs_diff(&an, &fd));
        let mut fdl = DMatrix::zeros(2, 3);
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = h;
            let col = (res(&pose, &(x + d)) - res(&pose, &(x - d))) / (2.0 * h);
            fdl.set_column(k, &col);
        }
        let an = DMatrix::from_column_slice(2, 3, jl.as_slice()) * cfg.sign("reprojection.point");
        e_point = e_point.max(max_abs_diff(&an, &fdl));
    }
    let t = cfg.jacobian_tolerance;
    Ok(vec![
        CheckResult::new("reprojection.pose", cfg.samples, e_pose, t),
        CheckResult::new("reprojection.point", cfg.samples, e_point, t),
    ])
}

/// Parameter groups within the 23-vector.
pub const GROUPS: [(&str, std::ops::Range<usize>); 5] = [
    ("mean", 0..3),
    ("log_scales", 3..6),
    ("rotation", 6..10),
    ("opacity", 10..11),
    ("sh", 11..23),
];

/// Central-difference gradient of `loss` over all parameters of `scene`.
pub fn fd_scene_gradient(
    scene: &[GaussianPrimitive],
    h: f64,
    loss: impl Fn(&[GaussianPrimitive]) -> f64 + Sync,
) -> Vec<[f64; PARAMS_PER_PRIMITIVE]> {
    use rayon::prelude::*;
    (0..scene.len())
        .into_par_iter()
        .map(|i| {
            let base = scene[i].to_params();
            let mut out = [0.0; PARAMS_PER_PRIMITIVE];
            let mut work = scene.to_vec();
            for (k, o) in out.iter_mut().enumerate() {
                let mut p = base;
                p[k] = base[k] + h;
                work[i] = GaussianPrimitive::from_params(&p);
                let lp = loss(&work);
                p[k] = base[k] - h;
                work[i] = GaussianPrimitive::from_params(&p);
                let lm = loss(&work);
                *o = (lp - lm) / (2.0 * h);
            }
            out
        })
        .collect()
}

/// Relative error per parameter group: `|a - f| / |f|` over all primitives.
pub fn group_errors(
    analytic: &[[f64; PARAMS_PER_PRIMITIVE]],
    fd: &[[f64; PARAMS_PER_PRIMITIVE]],
) -> [f64; 5] {
    let mut out = [0.0; 5];
    for (g, (_, range)) in GROUPS.iter().enumerate() {
        let (mut num, mut den) = (0.0, 0.0);
        for (a, f) in analytic.iter().zip(fd) {
            for k in range.clone() {
                num += (a[k] - f[k]).powi(2);
                den += f[k] * f[k];
            }
        }
        out[g] = if den > 0.0 {
            (num / den).sqrt()
        } else if num > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
    }
    out
}

/// Test fixture: 5 random primitives, a 16x16 view and random supervision.
pub fn loss_fixture(seed: u64) -> (Vec<GaussianPrimitive>, ViewCamera, SupervisionBundle) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = Camera::new(20.0, 20.0, 8.0, 8.0, 16, 16).expect("valid camera");
    let view = ViewCamera::new(
        cam,
        SE3Pose::new(
            so3_exp(&rand_vec(&mut rng, 0.05)).expect("finite"),
            rand_vec(&mut rng, 0.05),
        ),
    )
    .expect("valid view");
    let scene = random_scene(&mut rng, 5);
    let mut rgb = Image::new(16, 16, 3);
    for v in rgb.data.iter_mut() {
        *v = rng.random_range(0.0..1.0);
    }
    let mut normals = Image::new(16, 16, 3);
    for p in normals.data.chunks_mut(3) {
        let n = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..-0.2),
        )
        .normalize();
        p.copy_from_slice(n.as_slice());
    }
    let bundle = SupervisionBundle::new(rgb, normals).expect("matching shapes");
    (scene, view, bundle)
}

fn grads_with_corruption(
    grads: Vec<crate::splat::PrimitiveGrad>,
    cfg: &GradCheckConfig,
    prefix: &str,
) -> Vec<[f64; PARAMS_PER_PRIMITIVE]> {
    grads
        .iter()
        .map(|g| {
            let mut p = g.to_params();
            for (name, range) in GROUPS.iter() {
                let s = if prefix == "render" {
                    cfg.sign("render.backward")
                } else {
                    cfg.sign(&format!("total.{name}"))
                };
                for k in range.clone() {
                    p[k] *= s;
                }
            }
            p
        })
        .collect()
}

/// Renderer backward pass against a random quadratic loss on all buffers.
pub fn check_render_backward(cfg: &GradCheckConfig) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    for s in 0..cfg.scenes {
        let (scene, view, bundle) = loss_fixture(cfg.seed.wrapping_add(100 + s as u64));
        let targets = (&bundle.rgb, &bundle.normals);
        let loss = |sc: &[GaussianPrimitive]| {
            let b = render(sc, &view);
            let mut l = 0.0;
            for i in 0..b.color.data.len() {
                l += 0.5 * (b.color.data[i] - targets.0.data[i]).powi(2);
                l += 0.5 * (b.normal.data[i] - targets.1.data[i]).powi(2);
            }
            l + b.alpha.data.iter().map(|a| 0.5 * a * a).sum::<f64>()
        };
        let b = render(&scene, &view);
        let mut gc = b.color.clone();
        let mut gn = b.normal.clone();
        for i in 0..gc.data.len() {
            gc.data[i] -= targets.0.data[i];
            gn.data[i] -= targets.1.data[i];
        }
        let grads = render_backward(
            &scene,
            &view,
            &b,
            &Upstream {
                color: Some(&gc),
                normal: Some(&gn),
                alpha: Some(&b.alpha),
            },
        )?;
        let an = grads_with_corruption(grads, cfg, "render");
        let fd = fd_scene_gradient(&scene, cfg.render_step, loss);
        for e in group_errors(&an, &fd) {
            worst = worst.max(e);
        }
    }
    Ok(CheckResult::new(
        "render.backward",
        cfg.scenes,
        worst,
        cfg.gradient_rel_tolerance,
    ))
}

/// Full objective gradient, one result per parameter group.
pub fn check_total_loss(cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    let weights = LossWeights::default();
    let mut worst = [0.0f64; 5];
    for s in 0..cfg.scenes {
        let (scene, view, bundle) = loss_fixture(cfg.seed.wrapping_add(200 + s as u64));
        let loss = |sc: &[GaussianPrimitive]| {
            total_loss(sc, &view, &render(sc, &view), &bundle, &weights)
                .map(|(l, _)| l.total)
                .unwrap_or(f64::NAN)
        };
        let b = render(&scene, &view);
        let (_, grads) = total_loss(&scene, &view, &b, &bundle, &weights)?;
        let an = grads_with_corruption(grads, cfg, "total");
        let fd = fd_scene_gradient(&scene, cfg.loss_step, loss);
        for (w, e) in worst.iter_mut().zip(group_errors(&an, &fd)) {
            *w = w.max(e);
        }
    }
    Ok(GROUPS
        .iter()
        .zip(worst)
        .map(|((n, _), e)| CheckResult::new(&format!("total.{n}"), cfg.scenes, e, cfg.gradient_rel_tolerance))
        .collect())
}

pub fn run_all(cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    cfg.validate()?;
    let mut out = vec![check_lie(cfg)?];
    out.extend(check_prior(cfg)?);
    out.extend(check_relative(cfg)?);
    out.extend(check_reprojection(cfg)?);
    out.push(check_render_backward(cfg)?);
    out.extend(check_total_loss(cfg)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradCheckConfig {
        GradCheckConfig {
            samples: 20,
            scenes: 1,
            ..Default::default()
        }
    }

    #[test]
    fn all_suites_pass() {
        for r in run_all(&quick()).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn corrupted_block_is_named() {
        for block in ["prior.translation", "relative.d_ri", "total.rotation"] {
            let cfg = GradCheckConfig {
                corrupt: Some(block.to_string()),
                ..quick()
            };
            let failed: Vec<_> = run_all(&cfg)
                .unwrap()
                .into_iter()
                .filter(|r| !r.passed)
                .map(|r| r.name)
                .collect();
            assert_eq!(failed, vec![block.to_string()]);
        }
    }

    #[test]
    fn unknown_block_is_rejected() {
        let cfg = GradCheckConfig {
            corrupt: Some("nope".into()),
            ..quick()
        };
        assert!(run_all(&cfg).is_err());
    }
}
