//! Scale-aware pose refinement.
//!
//! The problem couples three kinds of residuals over world <- camera poses and
//! world-frame landmarks:
//!
//! * prior residuals anchoring each pose to its LiDAR-derived prior,
//! * relative residuals between camera pairs,
//! * robust (Huber) reprojection residuals of landmark observations.
//!
//! Every 6-residual is ordered `[rotation; translation]` and every pose
//! Jacobian column block is ordered `[d_rot, d_trans]`, where the pose is
//! perturbed as `R <- R * Exp(d_rot)`, `p <- p + d_trans`.
//!
//! The solver is Levenberg-Marquardt on the normal equations, with the
//! landmark blocks eliminated by a Schur complement and the reduced camera
//! system factored with a dense Cholesky.

use std::collections::BTreeMap;

use nalgebra::{
    DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix3, Matrix6, Matrix6x3, Vector2, Vector3, Vector6,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{hat, se3_inverse, so3_log, so3_right_jacobian_inv, SE3Pose};
use crate::traj::{isotropic_information, PosePrior};

pub type Residual6 = Vector6<f64>;

/// Pinhole intrinsics, pixels. Pixel centres sit at half-integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        let inside = self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx <= self.width as f64
            && self.cy <= self.height as f64;
        if !inside {
            return Err(Error::InvalidArgument(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Projects a camera-frame point; `None` for nonpositive depth.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeMeasurement {
    pub i: usize,
    pub j: usize,
    /// Measured `P_i^-1 P_j`, i.e. `(R_ij, p_ij)`.
    pub relative: SE3Pose,
    pub information: Matrix6<f64>,
}

impl RelativeMeasurement {
    pub fn new(i: usize, j: usize, relative: SE3Pose, information: Matrix6<f64>) -> Result<Self> {
        if i == j {
            return Err(Error::InvalidArgument(format!(
                "relative measurement links camera {i} to itself"
            )));
        }
        Ok(Self {
            i,
            j,
            relative,
            information,
        })
    }

    /// Measurement that `pose_i` and `pose_j` satisfy exactly.
    pub fn between(
        i: usize,
        j: usize,
        pose_i: &SE3Pose,
        pose_j: &SE3Pose,
        information: Matrix6<f64>,
    ) -> Result<Self> {
        let rel = crate::lie::se3_compose(&se3_inverse(pose_i), pose_j);
        Self::new(i, j, rel, information)
    }
}

/// Relative constraints between each consecutive pair `(k, k+1)`.
pub fn consecutive_relatives(
    poses: &[SE3Pose],
    rotation_weight: f64,
    translation_weight: f64,
) -> Vec<RelativeMeasurement> {
    let info = isotropic_information(rotation_weight, translation_weight);
    poses
        .windows(2)
        .enumerate()
        .map(|(k, w)| RelativeMeasurement::between(k, k + 1, &w[0], &w[1], info).unwrap())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub pose: usize,
    pub uv: Vector2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Landmark {
    pub position: Vector3<f64>,
    pub observations: Vec<Observation>,
    /// Held constant by the solver (surveyed / known structure).
    pub fixed: bool,
}

impl Landmark {
    pub fn new(position: Vector3<f64>, observations: Vec<Observation>) -> Self {
        Self {
            position,
            observations,
            fixed: false,
        }
    }
}

// ---------------------------------------------------------------------------
// residuals and jacobians

pub fn prior_residual(pose: &SE3Pose, prior: &PosePrior) -> Residual6 {
    let e_q = so3_log(&(prior.pose.rotation.inverse() * pose.rotation));
    let e_p = prior.pose.translation - pose.translation;
    Residual6::new(e_q.x, e_q.y, e_q.z, e_p.x, e_p.y, e_p.z)
}

/// Jacobian of [`prior_residual`] with respect to `[d_rot, d_trans]`.
///
/// The translation block is `-I`: `e_p = p_0 - p` decreases as `p` grows.
pub fn prior_jacobian(pose: &SE3Pose, prior: &PosePrior) -> Result<Matrix6<f64>> {
    let e_q = so3_log(&(prior.pose.rotation.inverse() * pose.rotation));
    let mut j = Matrix6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&so3_right_jacobian_inv(&e_q)?);
    j.fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(-Matrix3::identity()));
    Ok(j)
}

pub fn relative_residual(pose_i: &SE3Pose, pose_j: &SE3Pose, meas: &RelativeMeasurement) -> Residual6 {
    let r_ij_t = meas.relative.rotation.inverse();
    let r_i_t = pose_i.rotation.inverse();
    let e_q = so3_log(&(r_ij_t * r_i_t * pose_j.rotation));
    let e_p = r_ij_t.rotate(&r_i_t.rotate(&(pose_j.translation - pose_i.translation)))
        - r_ij_t.rotate(&meas.relative.translation);
    Residual6::new(e_q.x, e_q.y, e_q.z, e_p.x, e_p.y, e_p.z)
}

/// The four 6x3 blocks of the relative residual's Jacobian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeJacobians {
    pub d_pi: Matrix6x3<f64>,
    pub d_pj: Matrix6x3<f64>,
    pub d_ri: Matrix6x3<f64>,
    pub d_rj: Matrix6x3<f64>,
}

impl RelativeJacobians {
    /// 6x6 Jacobian with respect to pose `i`, columns `[d_rot, d_trans]`.
    pub fn pose_i(&self) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<6, 3>(0, 0).copy_from(&self.d_ri);
        m.fixed_view_mut::<6, 3>(0, 3).copy_from(&self.d_pi);
        m
    }

    pub fn pose_j(&self) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<6, 3>(0, 0).copy_from(&self.d_rj);
        m.fixed_view_mut::<6, 3>(0, 3).copy_from(&self.d_pj);
        m
    }
}

pub fn relative_jacobians(
    pose_i: &SE3Pose,
    pose_j: &SE3Pose,
    meas: &RelativeMeasurement,
) -> Result<RelativeJacobians> {
    let r_i = pose_i.rotation.matrix();
    let r_j = pose_j.rotation.matrix();
    let r_ij = meas.relative.rotation.matrix();
    let e_q = so3_log(&(meas.relative.rotation.inverse() * pose_i.rotation.inverse() * pose_j.rotation));
    let jr_inv = so3_right_jacobian_inv(&e_q)?;
    let a = r_ij.transpose() * r_i.transpose();
    let local = r_i.transpose() * (pose_j.translation - pose_i.translation);

    let mut d_pi = Matrix6x3::zeros();
    d_pi.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-a));
    let mut d_pj = Matrix6x3::zeros();
    d_pj.fixed_view_mut::<3, 3>(3, 0).copy_from(&a);
    let mut d_ri = Matrix6x3::zeros();
    d_ri.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-jr_inv * r_j.transpose() * r_i));
    d_ri.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(r_ij.transpose() * hat(&local)));
    let mut d_rj = Matrix6x3::zeros();
    d_rj.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr_inv);
    Ok(RelativeJacobians {
        d_pi,
        d_pj,
        d_ri,
        d_rj,
    })
}

/// `project(world -> camera(X)) - uv`, pixels. `None` when `X` is not in
/// front of the camera; such observations are excluded from the cost.
pub fn reprojection_residual(
    pose: &SE3Pose,
    cam: &Camera,
    x: &Vector3<f64>,
    uv: &Vector2<f64>,
) -> Option<Vector2<f64>> {
    let pc = pose.rotation.inverse().rotate(&(x - pose.translation));
    cam.project(&pc).map(|p| p - uv)
}

/// Jacobians of the reprojection residual with respect to the pose
/// (`[d_rot, d_trans]`) and the landmark.
pub fn reprojection_jacobians(
    pose: &SE3Pose,
    cam: &Camera,
    x: &Vector3<f64>,
) -> Option<(Matrix2x6<f64>, Matrix2x3<f64>)> {
    let r_t = pose.rotation.matrix().transpose();
    let pc = r_t * (x - pose.translation);
    if pc.z <= 0.0 {
        return None;
    }
    let iz = 1.0 / pc.z;
    let d_proj = Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * pc.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * pc.y * iz * iz,
    );
    let mut d_pose = Matrix2x6::zeros();
    d_pose
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(d_proj * hat(&pc)));
    d_pose
        .fixed_view_mut::<2, 3>(0, 3)
        .copy_from(&(-d_proj * r_t));
    Some((d_pose, d_proj * r_t))
}

// ---------------------------------------------------------------------------
// triangulation

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriangulationConfig {
    pub max_reprojection_error_px: f64,
    pub min_angle_deg: f64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self {
            max_reprojection_error_px: 4.0,
            min_angle_deg: 1.0,
        }
    }
}

/// Linear (DLT) triangulation from `(world <- camera pose, intrinsics, pixel)`
/// triples, using normalised image coordinates.
pub fn triangulate_dlt(
    observations: &[(SE3Pose, Camera, Vector2<f64>)],
    cfg: &TriangulationConfig,
) -> Result<Vector3<f64>> {
    if observations.len() < 2 {
        return Err(Error::Degenerate(format!(
            "need at least 2 observations, got {}",
            observations.len()
        )));
    }
    let mut a = DMatrix::<f64>::zeros(2 * observations.len(), 4);
    for (k, (pose, cam, uv)) in observations.iter().enumerate() {
        let cw = se3_inverse(pose);
        let r = cw.rotation.matrix();
        let t = cw.translation;
        let xn = (uv.x - cam.cx) / cam.fx;
        let yn = (uv.y - cam.cy) / cam.fy;
        for (row, coord, axis) in [(2 * k, xn, 0usize), (2 * k + 1, yn, 1usize)] {
            let mut v = [0.0; 4];
            for c in 0..3 {
                v[c] = coord * r[(2, c)] - r[(axis, c)];
            }
            v[3] = coord * t.z - t[axis];
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                for c in 0..4 {
                    a[(row, c)] = v[c] / n;
                }
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numeric("triangulation SVD failed".into()))?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let h = v_t.row(min_idx);
    if h[3].abs() < 1e-12 * h.norm() {
        return Err(Error::Degenerate("point at infinity".into()));
    }
    let x = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);

    let mut max_err = 0.0f64;
    for (pose, cam, uv) in observations {
        match reprojection_residual(pose, cam, &x, uv) {
            Some(r) => max_err = max_err.max(r.norm()),
            None => return Err(Error::Degenerate("point behind a camera".into())),
        }
    }
    let mut max_angle = 0.0f64;
    for a in 0..observations.len() {
        for b in a + 1..observations.len() {
            let ra = x - observations[a].0.translation;
            let rb = x - observations[b].0.translation;
            let c = (ra.dot(&rb) / (ra.norm() * rb.norm())).clamp(-1.0, 1.0);
            max_angle = max_angle.max(c.acos());
        }
    }
    if !(max_angle.to_degrees() >= cfg.min_angle_deg) {
        return Err(Error::Degenerate(format!(
            "triangulation angle {:.3} deg below {}",
            max_angle.to_degrees(),
            cfg.min_angle_deg
        )));
    }
    if max_err > cfg.max_reprojection_error_px {
        return Err(Error::Degenerate(format!(
            "reprojection error {max_err:.3} px above {}",
            cfg.max_reprojection_error_px
        )));
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// problem and solver

#[derive(Clone, Debug, Default)]
pub struct Problem {
    pub cameras: Vec<Camera>,
    /// world <- camera, one per image.
    pub poses: Vec<SE3Pose>,
    /// Index into `cameras` for each pose.
    pub pose_camera: Vec<usize>,
    pub fixed_poses: Vec<bool>,
    /// `camera_id` is the pose index.
    pub priors: Vec<PosePrior>,
    pub relatives: Vec<RelativeMeasurement>,
    pub landmarks: Vec<Landmark>,
}

impl Problem {
    pub fn new(cameras: Vec<Camera>, poses: Vec<SE3Pose>, pose_camera: Vec<usize>) -> Self {
        let n = poses.len();
        Self {
            cameras,
            poses,
            pose_camera,
            fixed_poses: vec![false; n],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.poses.len();
        if self.pose_camera.len() != n || self.fixed_poses.len() != n {
            return Err(Error::InvalidArgument(
                "pose_camera / fixed_poses length differs from poses".into(),
            ));
        }
        for c in &self.cameras {
            c.validate()?;
        }
        if let Some(&c) = self.pose_camera.iter().find(|&&c| c >= self.cameras.len()) {
            return Err(Error::InvalidArgument(format!("unknown camera index {c}")));
        }
        for p in &self.priors {
            p.validate()?;
            if p.camera_id >= n {
                return Err(Error::InvalidArgument(format!(
                    "prior references unknown pose {}",
                    p.camera_id
                )));
            }
        }
        for r in &self.relatives {
            if r.i == r.j || r.i >= n || r.j >= n {
                return Err(Error::InvalidArgument(format!(
                    "relative measurement ({}, {}) is invalid",
                    r.i, r.j
                )));
            }
        }
        for (l, lm) in self.landmarks.iter().enumerate() {
            if let Some(o) = lm.observations.iter().find(|o| o.pose >= n) {
                return Err(Error::InvalidArgument(format!(
                    "landmark {l} observed by unknown pose {}",
                    o.pose
                )));
            }
        }
        Ok(())
    }

    /// Fixes pose 0, removing the rigid gauge of a prior-free problem.
    pub fn fix_gauge(&mut self) {
        if let Some(f) = self.fixed_poses.first_mut() {
            *f = true;
        }
    }

    /// Re-triangulates every free landmark from the current poses. A rejected
    /// landmark loses its observations and drops out of the solve; the number
    /// of rejections is returned.
    pub fn triangulate_landmarks(&mut self, cfg: &TriangulationConfig) -> usize {
        let poses = &self.poses;
        let cams = &self.cameras;
        let pose_cam = &self.pose_camera;
        let results: Vec<Option<Vector3<f64>>> = self
            .landmarks
            .par_iter()
            .map(|lm| {
                let obs: Vec<_> = lm
                    .observations
                    .iter()
                    .map(|o| (poses[o.pose], cams[pose_cam[o.pose]], o.uv))
                    .collect();
                triangulate_dlt(&obs, cfg).ok()
            })
            .collect();
        let mut rejected = 0;
        for (lm, r) in self.landmarks.iter_mut().zip(results) {
            match r {
                _ if lm.fixed => {}
                Some(x) => lm.position = x,
                None => {
                    lm.observations.clear();
                    rejected += 1;
                }
            }
        }
        rejected
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub relative_cost_tolerance: f64,
    pub gradient_tolerance: f64,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_lambda: f64,
    /// Huber threshold on the reprojection residual norm, pixels.
    pub huber_delta_px: f64,
    /// Scalar information weight of each reprojection residual.
    pub reprojection_weight: f64,
    /// After each solve, observations whose residual exceeds
    /// `max_reprojection_error_px` are removed and the problem re-solved, up
    /// to this many times.
    pub outlier_rounds: usize,
    pub max_reprojection_error_px: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            relative_cost_tolerance: 1e-8,
            gradient_tolerance: 1e-10,
            initial_lambda: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.1,
            max_lambda: 1e12,
            huber_delta_px: 2.0,
            reprojection_weight: 1.0,
            outlier_rounds: 2,
            max_reprojection_error_px: 4.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub prior: f64,
    pub relative: f64,
    pub reprojection: f64,
    pub total: f64,
}

impl CostBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.prior + self.relative + self.reprojection;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    AlreadyOptimal,
    RelativeCostChange,
    GradientNorm,
    MaxIterations,
    LambdaExhausted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub round: usize,
    pub iteration: usize,
    pub lambda: f64,
    pub accepted: bool,
    pub cost: CostBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub termination: Termination,
    pub iterations: usize,
    pub initial_cost: CostBreakdown,
    pub final_cost: CostBreakdown,
    /// One record per LM trial step; the cost is the one in effect after the
    /// step (unchanged on rejection).
    pub history: Vec<IterationRecord>,
    pub observations_removed: usize,
}

pub struct Solution {
    pub poses: Vec<SE3Pose>,
    pub landmarks: Vec<Vector3<f64>>,
    pub report: SolveReport,
}

/// Huber: `rho(s) = s` for `sqrt(s) <= delta`, else `2 delta sqrt(s) - delta^2`.
/// Returns `(rho, rho')`.
fn huber(s: f64, delta: f64) -> (f64, f64) {
    if s <= delta * delta {
        (s, 1.0)
    } else {
        let r = s.sqrt();
        (2.0 * delta * r - delta * delta, delta / r)
    }
}

struct Layout {
    pose_var: Vec<Option<usize>>,
    n_pose_vars: usize,
    /// Landmark indices that participate (>= 2 observations).
    active: Vec<usize>,
}

impl Layout {
    fn new(p: &Problem) -> Self {
        let mut pose_var = Vec::with_capacity(p.poses.len());
        let mut n = 0;
        for &fixed in &p.fixed_poses {
            if fixed {
                pose_var.push(None);
            } else {
                pose_var.push(Some(n));
                n += 1;
            }
        }
        let active = p
            .landmarks
            .iter()
            .enumerate()
            .filter(|(_, l)| l.observations.len() >= 2)
            .map(|(i, _)| i)
            .collect();
        Self {
            pose_var,
            n_pose_vars: n,
            active,
        }
    }
}

/// Per-landmark contribution to the normal equations.
/// (pose var, H_pp, H_pl, g_p)
type ObsBlock = (usize, Matrix6<f64>, Matrix6x3<f64>, Vector6<f64>);
/// (landmark index, step)
type LandmarkStep = (usize, Vector3<f64>);

struct LandmarkBlock {
    h_ll: Matrix3<f64>,
    g_l: Vector3<f64>,
    obs: Vec<ObsBlock>,
    cost: f64,
}

struct Normal {
    h_pp: DMatrix<f64>,
    g_p: DVector<f64>,
    landmarks: Vec<(usize, LandmarkBlock)>,
}

fn evaluate_cost(p: &Problem, layout: &Layout, cfg: &SolverConfig) -> CostBreakdown {
    let mut c = CostBreakdown::default();
    for prior in &p.priors {
        let e = prior_residual(&p.poses[prior.camera_id], prior);
        c.prior += 0.5 * e.dot(&(prior.information * e));
    }
    for m in &p.relatives {
        let e = relative_residual(&p.poses[m.i], &p.poses[m.j], m);
        c.relative += 0.5 * e.dot(&(m.information * e));
    }
    let per: Vec<f64> = layout
        .active
        .par_iter()
        .map(|&l| {
            let lm = &p.landmarks[l];
            lm.observations
                .iter()
                .filter_map(|o| {
                    let cam = &p.cameras[p.pose_camera[o.pose]];
                    reprojection_residual(&p.poses[o.pose], cam, &lm.position, &o.uv)
                })
                .map(|r| 0.5 * cfg.reprojection_weight * huber(r.norm_squared(), cfg.huber_delta_px).0)
                .sum()
        })
        .collect();
    c.reprojection = per.iter().sum();
    c.finish()
}

fn build_normal(p: &Problem, layout: &Layout, cfg: &SolverConfig) -> Result<Normal> {
    let np = layout.n_pose_vars;
    let mut h_pp = DMatrix::<f64>::zeros(6 * np, 6 * np);
    let mut g_p = DVector::<f64>::zeros(6 * np);
    let add_pp = |h: &mut DMatrix<f64>, a: usize, b: usize, m: &Matrix6<f64>| {
        let mut v = h.fixed_view_mut::<6, 6>(6 * a, 6 * b);
        v += m;
    };

    for prior in &p.priors {
        let pose = &p.poses[prior.camera_id];
        let e = prior_residual(pose, prior);
        if let Some(v) = layout.pose_var[prior.camera_id] {
            let j = prior_jacobian(pose, prior)?;
            let jt_w = j.transpose() * prior.information;
            add_pp(&mut h_pp, v, v, &(jt_w * j));
            let mut g = g_p.fixed_rows_mut::<6>(6 * v);
            g += jt_w * e;
        }
    }

    for m in &p.relatives {
        let (pi, pj) = (&p.poses[m.i], &p.poses[m.j]);
        let e = relative_residual(pi, pj, m);
        let jac = relative_jacobians(pi, pj, m)?;
        let blocks = [
            (layout.pose_var[m.i], jac.pose_i()),
            (layout.pose_var[m.j], jac.pose_j()),
        ];
        for (va, ja) in &blocks {
            let Some(a) = *va else { continue };
            let jt_w = ja.transpose() * m.information;
            {
                let mut g = g_p.fixed_rows_mut::<6>(6 * a);
                g += jt_w * e;
            }
            for (vb, jb) in &blocks {
                if let Some(b) = *vb {
                    add_pp(&mut h_pp, a, b, &(jt_w * jb));
                }
            }
        }
    }

    let w = cfg.reprojection_weight;
    let delta = cfg.huber_delta_px;
    let blocks: Vec<(usize, LandmarkBlock)> = layout
        .active
        .par_iter()
        .map(|&l| {
            let lm = &p.landmarks[l];
            let mut blk = LandmarkBlock {
                h_ll: Matrix3::zeros(),
                g_l: Vector3::zeros(),
                obs: Vec::with_capacity(lm.observations.len()),
                cost: 0.0,
            };
            for o in &lm.observations {
                let pose = &p.poses[o.pose];
                let cam = &p.cameras[p.pose_camera[o.pose]];
                let Some(r) = reprojection_residual(pose, cam, &lm.position, &o.uv) else {
                    continue;
                };
                let Some((jp, jl)) = reprojection_jacobians(pose, cam, &lm.position) else {
                    continue;
                };
                let (rho, drho) = huber(r.norm_squared(), delta);
                blk.cost += 0.5 * w * rho;
                let s = w * drho;
                if !lm.fixed {
                    blk.h_ll += s * jl.transpose() * jl;
                    blk.g_l += s * jl.transpose() * r;
                }
                if let Some(v) = layout.pose_var[o.pose] {
                    let h_pl = if lm.fixed {
                        Matrix6x3::zeros()
                    } else {
                        s * jp.transpose() * jl
                    };
                    blk.obs
                        .push((v, s * jp.transpose() * jp, h_pl, s * jp.transpose() * r));
                }
            }
            (l, blk)
        })
        .collect();

    for (_, blk) in &blocks {
        for (v, hpp, _, gp) in &blk.obs {
            add_pp(&mut h_pp, *v, *v, hpp);
            let mut g = g_p.fixed_rows_mut::<6>(6 * v);
            g += gp;
        }
    }

    Ok(Normal {
        h_pp,
        g_p,
        landmarks: blocks,
    })
}

fn gradient_inf_norm(n: &Normal, p: &Problem) -> f64 {
    let mut g = n.g_p.amax();
    for (l, blk) in &n.landmarks {
        if !p.landmarks[*l].fixed {
            g = g.max(blk.g_l.amax());
        }
    }
    g
}

fn damp(d: f64, lambda: f64) -> f64 {
    d + lambda * d.max(1e-9)
}

/// Solves the damped system; returns pose and landmark steps.
fn solve_damped(
    n: &Normal,
    p: &Problem,
    lambda: f64,
) -> Option<(DVector<f64>, Vec<LandmarkStep>)> {
    let dim = n.h_pp.nrows();
    let mut s = n.h_pp.clone();
    for i in 0..dim {
        s[(i, i)] = damp(n.h_pp[(i, i)], lambda);
    }
    let mut rhs = -n.g_p.clone();

    // Schur complement on landmarks
    let mut inv_ll = Vec::with_capacity(n.landmarks.len());
    for (l, blk) in &n.landmarks {
        if p.landmarks[*l].fixed {
            inv_ll.push(None);
            continue;
        }
        let mut h = blk.h_ll;
        for i in 0..3 {
            h[(i, i)] = damp(blk.h_ll[(i, i)], lambda);
        }
        let inv = h.try_inverse()?;
        for (a, _, hpl_a, _) in &blk.obs {
            let t = hpl_a * inv;
            {
                let mut r = rhs.fixed_rows_mut::<6>(6 * a);
                r += t * blk.g_l;
            }
            for (b, _, hpl_b, _) in &blk.obs {
                let mut v = s.fixed_view_mut::<6, 6>(6 * a, 6 * b);
                v -= t * hpl_b.transpose();
            }
        }
        inv_ll.push(Some(inv));
    }

    let dp = if dim > 0 {
        s.cholesky()?.solve(&rhs)
    } else {
        DVector::zeros(0)
    };
    if !dp.iter().all(|v| v.is_finite()) {
        return None;
    }

    let mut dl = Vec::with_capacity(n.landmarks.len());
    for ((l, blk), inv) in n.landmarks.iter().zip(&inv_ll) {
        let Some(inv) = inv else { continue };
        let mut r = -blk.g_l;
        for (a, _, hpl, _) in &blk.obs {
            r -= hpl.transpose() * dp.fixed_rows::<6>(6 * a);
        }
        let d = inv * r;
        if !d.iter().all(|v| v.is_finite()) {
            return None;
        }
        dl.push((*l, d));
    }
    Some((dp, dl))
}

fn apply_step(
    p: &Problem,
    layout: &Layout,
    dp: &DVector<f64>,
    dl: &[(usize, Vector3<f64>)],
) -> Result<Problem> {
    let mut q = p.clone();
    for (i, v) in layout.pose_var.iter().enumerate() {
        if let Some(v) = v {
            let d = dp.fixed_rows::<6>(6 * v);
            q.poses[i] = p.poses[i].retract(
                &Vector3::new(d[0], d[1], d[2]),
                &Vector3::new(d[3], d[4], d[5]),
            )?;
        }
    }
    for (l, d) in dl {
        q.landmarks[*l].position += d;
    }
    Ok(q)
}

struct LmOutcome {
    termination: Termination,
    iterations: usize,
}

fn levenberg_marquardt(
    p: &mut Problem,
    cfg: &SolverConfig,
    round: usize,
    history: &mut Vec<IterationRecord>,
) -> Result<LmOutcome> {
    let layout = Layout::new(p);
    let mut lambda = cfg.initial_lambda;
    let mut iterations = 0;
    let mut cost = evaluate_cost(p, &layout, cfg);
    if cost.total == 0.0 {
        return Ok(LmOutcome {
            termination: Termination::AlreadyOptimal,
            iterations: 0,
        });
    }

    loop {
        if iterations >= cfg.max_iterations {
            return Ok(LmOutcome {
                termination: Termination::MaxIterations,
                iterations,
            });
        }
        let normal = build_normal(p, &layout, cfg)?;
        if gradient_inf_norm(&normal, p) < cfg.gradient_tolerance {
            return Ok(LmOutcome {
                termination: if iterations == 0 {
                    Termination::AlreadyOptimal
                } else {
                    Termination::GradientNorm
                },
                iterations,
            });
        }
        iterations += 1;
        loop {
            let step = solve_damped(&normal, p, lambda);
            let candidate = match step {
                Some((dp, dl)) => Some(apply_step(p, &layout, &dp, &dl)?),
                None => None,
            };
            let new_cost = candidate
                .as_ref()
                .map(|q| evaluate_cost(q, &layout, cfg))
                .filter(|c| c.total.is_finite());
            match (candidate, new_cost) {
                (Some(q), Some(c)) if c.total < cost.total => {
                    let rel = (cost.total - c.total) / cost.total;
                    *p = q;
                    cost = c;
                    history.push(IterationRecord {
                        round,
                        iteration: iterations,
                        lambda,
                        accepted: true,
                        cost,
                    });
                    lambda = (lambda * cfg.lambda_down).max(1e-15);
                    if rel < cfg.relative_cost_tolerance {
                        return Ok(LmOutcome {
                            termination: Termination::RelativeCostChange,
                            iterations,
                        });
                    }
                    break;
                }
                (_, c) => {
                    history.push(IterationRecord {
                        round,
                        iteration: iterations,
                        lambda,
                        accepted: false,
                        cost,
                    });
                    // a step that changes nothing measurable means we are at
                    // the numerical optimum
                    if let Some(c) = c {
                        if (c.total - cost.total).abs()
                            <= cfg.relative_cost_tolerance * cost.total
                        {
                            return Ok(LmOutcome {
                                termination: Termination::RelativeCostChange,
                                iterations,
                            });
                        }
                    }
                    lambda *= cfg.lambda_up;
                    if lambda > cfg.max_lambda {
                        return Ok(LmOutcome {
                            termination: Termination::LambdaExhausted,
                            iterations,
                        });
                    }
                }
            }
        }
    }
}

/// Removes observations with residual above `threshold`; returns how many.
fn filter_outliers(p: &mut Problem, threshold: f64) -> usize {
    let mut removed = 0;
    let poses = p.poses.clone();
    for lm in &mut p.landmarks {
        let before = lm.observations.len();
        let pos = lm.position;
        lm.observations.retain(|o| {
            let cam = &p.cameras[p.pose_camera[o.pose]];
            match reprojection_residual(&poses[o.pose], cam, &pos, &o.uv) {
                Some(r) => r.norm() <= threshold,
                None => false,
            }
        });
        removed += before - lm.observations.len();
    }
    removed
}

/// Refines poses and landmarks. Returns the best iterate even when the solver
/// does not converge (`report.converged == false`).
pub fn solve(problem: &Problem, cfg: &SolverConfig) -> Result<Solution> {
    problem.validate()?;
    let mut p = problem.clone();
    let initial_cost = evaluate_cost(&p, &Layout::new(&p), cfg);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut removed = 0;
    let mut outcome = levenberg_marquardt(&mut p, cfg, 0, &mut history)?;
    iterations += outcome.iterations;
    for round in 1..=cfg.outlier_rounds {
        let n = filter_outliers(&mut p, cfg.max_reprojection_error_px);
        if n == 0 {
            break;
        }
        removed += n;
        outcome = levenberg_marquardt(&mut p, cfg, round, &mut history)?;
        iterations += outcome.iterations;
    }
    let final_cost = evaluate_cost(&p, &Layout::new(&p), cfg);
    let converged = !matches!(
        outcome.termination,
        Termination::LambdaExhausted | Termination::MaxIterations
    );
    Ok(Solution {
        poses: p.poses,
        landmarks: p.landmarks.iter().map(|l| l.position).collect(),
        report: SolveReport {
            converged,
            termination: outcome.termination,
            iterations,
            initial_cost,
            final_cost,
            history,
            observations_removed: removed,
        },
    })
}

pub fn total_cost(problem: &Problem, cfg: &SolverConfig) -> CostBreakdown {
    evaluate_cost(problem, &Layout::new(problem), cfg)
}

/// Undamped Gauss-Newton Hessian over all free variables (poses first, then
/// free landmarks). Dense; intended for diagnostics on small problems.
pub fn gauss_newton_hessian(problem: &Problem, cfg: &SolverConfig) -> Result<DMatrix<f64>> {
    let layout = Layout::new(problem);
    let normal = build_normal(problem, &layout, cfg)?;
    let np = 6 * layout.n_pose_vars;
    let mut lm_index = BTreeMap::new();
    for (l, _) in &normal.landmarks {
        if !problem.landmarks[*l].fixed {
            let k = lm_index.len();
            lm_index.insert(*l, k);
        }
    }
    let dim = np + 3 * lm_index.len();
    let mut h = DMatrix::zeros(dim, dim);
    h.view_mut((0, 0), (np, np)).copy_from(&normal.h_pp);
    for (l, blk) in &normal.landmarks {
        let Some(&k) = lm_index.get(l) else { continue };
        let o = np + 3 * k;
        h.fixed_view_mut::<3, 3>(o, o).copy_from(&blk.h_ll);
        for (v, _, hpl, _) in &blk.obs {
            let mut a = h.fixed_view_mut::<6, 3>(6 * v, o);
            a += hpl;
            let mut b = h.fixed_view_mut::<3, 6>(o, 6 * v);
            b += hpl.transpose();
        }
    }
    Ok(h)
}
