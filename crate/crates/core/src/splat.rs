//! CPU Gaussian-splat renderer with a hand-derived backward pass.
//!
//! Primitives are projected to screen-space Gaussians, sorted globally by
//! depth and alpha-blended front to back per pixel. Besides color and alpha,
//! the renderer blends per-primitive normals (minor axis, camera frame).
//! Pixel centres are at `(col + 0.5, row + 0.5)`.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{se3_compose, se3_inverse, Rotation, SE3Pose};
use crate::posegraph::Camera;
use crate::raster::Image;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const NEAR_PLANE: f64 = 0.01;
pub const COV2D_DILATION: f64 = 0.3;
pub const MAX_ALPHA: f64 = 0.999;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Mahalanobis-squared radius of the 3-sigma footprint.
const FOOTPRINT_Q: f64 = 9.0;
/// Rows per reduction chunk in the backward pass. Fixed so that the
/// summation order does not depend on the thread count.
const BACKWARD_CHUNK_ROWS: usize = 4;

/// Number of scalar parameters per primitive.
pub const PARAMS_PER_PRIMITIVE: usize = 23;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub mean: Vector3<f64>,
    pub log_scales: Vector3<f64>,
    pub rotation: Rotation,
    pub opacity_logit: f64,
    /// Degree <= 1 SH coefficients, `sh[k * 3 + channel]`.
    pub sh: [f64; 12],
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl GaussianPrimitive {
    /// Isotropic primitive with constant (view-independent) color.
    pub fn isotropic(mean: Vector3<f64>, scale: f64, opacity: f64, rgb: [f64; 3]) -> Self {
        let mut sh = [0.0; 12];
        for c in 0..3 {
            sh[c] = (rgb[c] - 0.5) / SH_C0;
        }
        Self {
            mean,
            log_scales: Vector3::repeat(scale.ln()),
            rotation: Rotation::identity(),
            opacity_logit: logit(opacity),
            sh,
        }
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scales.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation.matrix() * Matrix3::from_diagonal(&self.scales());
        m * m.transpose()
    }

    /// Index of the smallest scale, lowest index on ties.
    pub fn minor_axis(&self) -> usize {
        let s = &self.log_scales;
        let mut k = 0;
        for i in 1..3 {
            if s[i] < s[k] {
                k = i;
            }
        }
        k
    }

    /// View-dependent color for unit direction `d` (from mean towards the
    /// camera), before clamping.
    pub fn sh_color(&self, d: &Vector3<f64>) -> [f64; 3] {
        let basis = sh_basis(d);
        let mut out = [0.5; 3];
        for (c, o) in out.iter_mut().enumerate() {
            for (k, b) in basis.iter().enumerate() {
                *o += b * self.sh[k * 3 + c];
            }
        }
        out
    }

    pub fn to_params(&self) -> [f64; PARAMS_PER_PRIMITIVE] {
        let mut p = [0.0; PARAMS_PER_PRIMITIVE];
        p[0..3].copy_from_slice(self.mean.as_slice());
        p[3..6].copy_from_slice(self.log_scales.as_slice());
        p[6..10].copy_from_slice(&self.rotation.wxyz());
        p[10] = self.opacity_logit;
        p[11..23].copy_from_slice(&self.sh);
        p
    }

    /// Inverse of [`to_params`](Self::to_params); the quaternion is normalised.
    pub fn from_params(p: &[f64]) -> Self {
        let mut sh = [0.0; 12];
        sh.copy_from_slice(&p[11..23]);
        Self {
            mean: Vector3::new(p[0], p[1], p[2]),
            log_scales: Vector3::new(p[3], p[4], p[5]),
            rotation: Rotation::from_wxyz(p[6], p[7], p[8], p[9]),
            opacity_logit: p[10],
            sh,
        }
    }
}

fn sh_basis(d: &Vector3<f64>) -> [f64; 4] {
    [SH_C0, -SH_C1 * d.y, SH_C1 * d.z, -SH_C1 * d.x]
}

/// Gradient with respect to the 23 primitive parameters; the rotation entry
/// is with respect to the stored `(w, x, y, z)` through normalisation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrimitiveGrad {
    pub mean: Vector3<f64>,
    pub log_scales: Vector3<f64>,
    pub rotation: Vector4<f64>,
    pub opacity_logit: f64,
    pub sh: [f64; 12],
}

impl PrimitiveGrad {
    pub fn to_params(&self) -> [f64; PARAMS_PER_PRIMITIVE] {
        let mut p = [0.0; PARAMS_PER_PRIMITIVE];
        p[0..3].copy_from_slice(self.mean.as_slice());
        p[3..6].copy_from_slice(self.log_scales.as_slice());
        p[6..10].copy_from_slice(self.rotation.as_slice());
        p[10] = self.opacity_logit;
        p[11..23].copy_from_slice(&self.sh);
        p
    }

    pub fn add_assign(&mut self, o: &PrimitiveGrad) {
        self.mean += o.mean;
        self.log_scales += o.log_scales;
        self.rotation += o.rotation;
        self.opacity_logit += o.opacity_logit;
        for (a, b) in self.sh.iter_mut().zip(&o.sh) {
            *a += b;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.to_params().iter().all(|v| *v == 0.0)
    }
}

/// Intrinsics plus the world -> camera transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewCamera {
    pub camera: Camera,
    pub world_to_camera: SE3Pose,
}

impl ViewCamera {
    pub fn new(camera: Camera, world_to_camera: SE3Pose) -> Result<Self> {
        camera.validate()?;
        Ok(Self {
            camera,
            world_to_camera,
        })
    }

    /// From a camera -> world (camera pose) transform.
    pub fn from_pose(camera: Camera, camera_to_world: &SE3Pose) -> Result<Self> {
        Self::new(camera, se3_inverse(camera_to_world))
    }

    pub fn center(&self) -> Vector3<f64> {
        se3_inverse(&self.world_to_camera).translation
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
}

/// Screen-space projection; `None` when the mean is at or in front of the
/// near plane.
pub fn project_gaussian(g: &GaussianPrimitive, view: &ViewCamera) -> Option<Projection> {
    let w = view.world_to_camera.rotation.matrix();
    let t = view.world_to_camera.transform_point(&g.mean);
    if t.z <= NEAR_PLANE {
        return None;
    }
    let cam = &view.camera;
    let j = projection_jacobian(cam, &t);
    let cov_c = w * g.covariance() * w.transpose();
    let cov2d = j * cov_c * j.transpose() + Matrix2::identity() * COV2D_DILATION;
    Some(Projection {
        mean2d: Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy),
        cov2d,
        depth: t.z,
    })
}

fn projection_jacobian(cam: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    )
}

/// Minor-axis normal in the world frame, oriented towards the camera.
pub fn gaussian_normal(g: &GaussianPrimitive, view: &ViewCamera) -> Vector3<f64> {
    let n = g.rotation.matrix().column(g.minor_axis()).into_owned();
    let ray = g.mean - view.center();
    if n.dot(&ray) > 0.0 {
        -n
    } else {
        n
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Projected {
    id: usize,
    depth: f64,
    mean2d: Vector2<f64>,
    /// Inverse 2D covariance `[[a, b], [b, c]]`.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    normal: Vector3<f64>,
    /// Inclusive pixel bounds of the 3-sigma box.
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

impl Projected {
    #[inline]
    fn alpha_at(&self, px: f64, py: f64) -> Option<(f64, f64, f64, f64)> {
        let dx = px - self.mean2d.x;
        let dy = py - self.mean2d.y;
        let [a, b, c] = self.conic;
        let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        if !(q <= FOOTPRINT_Q) {
            return None;
        }
        let g = (-0.5 * q).exp();
        Some(((self.opacity * g).min(MAX_ALPHA), g, dx, dy))
    }
}

fn project_for_render(
    id: usize,
    g: &GaussianPrimitive,
    view: &ViewCamera,
    width: usize,
    height: usize,
) -> Option<Projected> {
    let p = project_gaussian(g, view)?;
    let cov = p.cov2d;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det > 0.0) {
        return None;
    }
    let conic = [cov[(1, 1)] / det, -cov[(0, 1)] / det, cov[(0, 0)] / det];
    let rx = 3.0 * cov[(0, 0)].sqrt();
    let ry = 3.0 * cov[(1, 1)].sqrt();
    // pixel centre (i + 0.5) within [m - r, m + r]
    let lo = |m: f64, r: f64| (m - r - 0.5).ceil().max(0.0);
    let hi = |m: f64, r: f64, n: usize| (m + r - 0.5).floor().min(n as f64 - 1.0);
    let (x0, x1) = (lo(p.mean2d.x, rx), hi(p.mean2d.x, rx, width));
    let (y0, y1) = (lo(p.mean2d.y, ry), hi(p.mean2d.y, ry, height));
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    let center = view.center();
    let d = (center - g.mean).normalize();
    let color = g.sh_color(&d).map(|c| c.clamp(0.0, 1.0));
    let w = view.world_to_camera.rotation.matrix();
    let normal = w * gaussian_normal(g, view);
    Some(Projected {
        id,
        depth: p.depth,
        mean2d: p.mean2d,
        conic,
        opacity: g.opacity(),
        color,
        normal,
        x0: x0 as usize,
        x1: x1 as usize,
        y0: y0 as usize,
        y1: y1 as usize,
    })
}

/// Output of [`render`], retained for the backward pass.
#[derive(Clone, Debug)]
pub struct RenderBuffers {
    pub color: Image,
    /// Unnormalised alpha-blended normals, camera frame.
    pub normal: Image,
    pub alpha: Image,
    projected: Vec<Projected>,
    /// Per-pixel contributor lists into `projected`, front to back.
    offsets: Vec<usize>,
    contributors: Vec<u32>,
    fingerprint: u64,
}

/// One splat's contribution at a pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution {
    pub primitive: usize,
    pub alpha: f64,
    /// Transmittance in front of this splat.
    pub transmittance: f64,
}

impl RenderBuffers {
    pub fn width(&self) -> usize {
        self.alpha.width
    }

    pub fn height(&self) -> usize {
        self.alpha.height
    }

    /// Front-to-back contributions at pixel `(x, y)`.
    pub fn contributions(&self, x: usize, y: usize) -> Vec<Contribution> {
        let p = y * self.width() + x;
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut t = 1.0;
        self.contributors[self.offsets[p]..self.offsets[p + 1]]
            .iter()
            .map(|&k| {
                let pr = &self.projected[k as usize];
                let (alpha, ..) = pr.alpha_at(px, py).expect("contributor outside footprint");
                let c = Contribution {
                    primitive: pr.id,
                    alpha,
                    transmittance: t,
                };
                t *= 1.0 - alpha;
                c
            })
            .collect()
    }
}

fn fingerprint(scene: &[GaussianPrimitive], view: &ViewCamera) -> u64 {
    let mut h = DefaultHasher::new();
    scene.len().hash(&mut h);
    for g in scene {
        for v in g.to_params() {
            v.to_bits().hash(&mut h);
        }
    }
    let c = &view.camera;
    for v in [c.fx, c.fy, c.cx, c.cy] {
        v.to_bits().hash(&mut h);
    }
    (c.width, c.height).hash(&mut h);
    for v in view.world_to_camera.rotation.wxyz() {
        v.to_bits().hash(&mut h);
    }
    for v in view.world_to_camera.translation.iter() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

pub fn render(scene: &[GaussianPrimitive], view: &ViewCamera) -> RenderBuffers {
    let (w, h) = (view.camera.width as usize, view.camera.height as usize);
    let mut projected: Vec<Projected> = scene
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_for_render(i, g, view, w, h))
        .collect();
    projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id)));

    struct Row {
        color: Vec<f64>,
        normal: Vec<f64>,
        alpha: Vec<f64>,
        counts: Vec<usize>,
        ids: Vec<u32>,
    }

    let rows: Vec<Row> = (0..h)
        .into_par_iter()
        .map(|y| {
            let py = y as f64 + 0.5;
            let cand: Vec<u32> = projected
                .iter()
                .enumerate()
                .filter(|(_, p)| p.y0 <= y && y <= p.y1)
                .map(|(k, _)| k as u32)
                .collect();
            let mut row = Row {
                color: vec![0.0; 3 * w],
                normal: vec![0.0; 3 * w],
                alpha: vec![0.0; w],
                counts: vec![0; w],
                ids: Vec::new(),
            };
            for x in 0..w {
                let px = x as f64 + 0.5;
                let mut t = 1.0;
                let mut n = 0;
                for &k in &cand {
                    let p = &projected[k as usize];
                    if x < p.x0 || x > p.x1 {
                        continue;
                    }
                    let Some((alpha, ..)) = p.alpha_at(px, py) else {
                        continue;
                    };
                    let wgt = alpha * t;
                    for c in 0..3 {
                        row.color[3 * x + c] += wgt * p.color[c];
                        row.normal[3 * x + c] += wgt * p.normal[c];
                    }
                    t *= 1.0 - alpha;
                    row.ids.push(k);
                    n += 1;
                    if t < MIN_TRANSMITTANCE {
                        break;
                    }
                }
                row.alpha[x] = 1.0 - t;
                row.counts[x] = n;
            }
            row
        })
        .collect();

    let mut color = Image::new(w, h, 3);
    let mut normal = Image::new(w, h, 3);
    let mut alpha = Image::new(w, h, 1);
    let mut offsets = Vec::with_capacity(w * h + 1);
    let mut contributors = Vec::new();
    offsets.push(0);
    for (y, row) in rows.into_iter().enumerate() {
        color.data[3 * w * y..3 * w * (y + 1)].copy_from_slice(&row.color);
        normal.data[3 * w * y..3 * w * (y + 1)].copy_from_slice(&row.normal);
        alpha.data[w * y..w * (y + 1)].copy_from_slice(&row.alpha);
        for n in row.counts {
            offsets.push(offsets.last().unwrap() + n);
        }
        contributors.extend(row.ids);
    }

    RenderBuffers {
        color,
        normal,
        alpha,
        projected,
        offsets,
        contributors,
        fingerprint: fingerprint(scene, view),
    }
}

/// Loss gradients with respect to the rendered buffers. Any of them may be
/// omitted (treated as zero).
#[derive(Clone, Copy, Debug, Default)]
pub struct Upstream<'a> {
    pub color: Option<&'a Image>,
    pub normal: Option<&'a Image>,
    pub alpha: Option<&'a Image>,
}

/// Screen-space gradient accumulator for one projected primitive:
/// mean2d (2), conic a/b/c (3), opacity (1), color (3), normal (3).
type Grad2d = [f64; 12];

pub fn render_backward(
    scene: &[GaussianPrimitive],
    view: &ViewCamera,
    buffers: &RenderBuffers,
    upstream: &Upstream<'_>,
) -> Result<Vec<PrimitiveGrad>> {
    if fingerprint(scene, view) != buffers.fingerprint {
        return Err(Error::StaleBuffers);
    }
    let (w, h) = (buffers.width(), buffers.height());
    for (img, ch, name) in [
        (upstream.color, 3, "color gradient"),
        (upstream.normal, 3, "normal gradient"),
        (upstream.alpha, 1, "alpha gradient"),
    ] {
        if let Some(img) = img {
            if img.width != w || img.height != h || img.channels != ch {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {}x{}x{}, expected {w}x{h}x{ch}",
                    img.width, img.height, img.channels
                )));
            }
        }
    }

    let n_proj = buffers.projected.len();
    let chunks: Vec<Vec<Grad2d>> = (0..h.div_ceil(BACKWARD_CHUNK_ROWS))
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![[0.0; 12]; n_proj];
            let mut alphas = Vec::new();
            let y_end = ((chunk + 1) * BACKWARD_CHUNK_ROWS).min(h);
            for y in chunk * BACKWARD_CHUNK_ROWS..y_end {
                for x in 0..w {
                    backward_pixel(buffers, upstream, x, y, &mut acc, &mut alphas);
                }
            }
            acc
        })
        .collect();

    let mut total = vec![[0.0; 12]; n_proj];
    for c in &chunks {
        for (t, g) in total.iter_mut().zip(c) {
            for k in 0..12 {
                t[k] += g[k];
            }
        }
    }

    let per_proj: Vec<(usize, PrimitiveGrad)> = buffers
        .projected
        .par_iter()
        .zip(total.par_iter())
        .map(|(p, g)| (p.id, projection_backward(&scene[p.id], view, p, g)))
        .collect();
    let mut out = vec![PrimitiveGrad::default(); scene.len()];
    for (id, g) in per_proj {
        out[id] = g;
    }
    Ok(out)
}

fn backward_pixel(
    buf: &RenderBuffers,
    up: &Upstream<'_>,
    x: usize,
    y: usize,
    acc: &mut [Grad2d],
    scratch: &mut Vec<(usize, f64, f64, f64, f64, f64)>,
) {
    let p = y * buf.width() + x;
    let ids = &buf.contributors[buf.offsets[p]..buf.offsets[p + 1]];
    if ids.is_empty() {
        return;
    }
    let gc = up.color.map(|i| i.pixel(x, y)).unwrap_or(&[0.0; 3]);
    let gn = up.normal.map(|i| i.pixel(x, y)).unwrap_or(&[0.0; 3]);
    let ga = up.alpha.map(|i| i.data[p]).unwrap_or(0.0);
    if gc.iter().chain(gn).all(|v| *v == 0.0) && ga == 0.0 {
        return;
    }
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);

    // forward replay: (k, alpha, G, dx, dy, T_before)
    scratch.clear();
    let mut t = 1.0;
    for &k in ids {
        let pr = &buf.projected[k as usize];
        let (alpha, g, dx, dy) = pr.alpha_at(px, py).expect("contributor outside footprint");
        scratch.push((k as usize, alpha, g, dx, dy, t));
        t *= 1.0 - alpha;
    }
    let t_final = t;

    // suffix sums S = sum_{j > i} f_j alpha_j T_j
    let mut s_color = [0.0; 3];
    let mut s_normal = [0.0; 3];
    for &(k, alpha, g, dx, dy, t_i) in scratch.iter().rev() {
        let pr = &buf.projected[k];
        let a = &mut acc[k];
        let wgt = alpha * t_i;
        let mut d_alpha = ga * t_final / (1.0 - alpha);
        for c in 0..3 {
            a[6 + c] += gc[c] * wgt;
            a[9 + c] += gn[c] * wgt;
            d_alpha += gc[c] * (t_i * pr.color[c] - s_color[c] / (1.0 - alpha));
            d_alpha += gn[c] * (t_i * pr.normal[c] - s_normal[c] / (1.0 - alpha));
        }
        for c in 0..3 {
            s_color[c] += pr.color[c] * wgt;
            s_normal[c] += pr.normal[c] * wgt;
        }
        if pr.opacity * g >= MAX_ALPHA {
            continue;
        }
        // alpha = o * G, G = exp(-q / 2)
        a[5] += d_alpha * g;
        let d_g = d_alpha * pr.opacity;
        let [ca, cb, cc] = pr.conic;
        a[0] += d_g * g * (ca * dx + cb * dy);
        a[1] += d_g * g * (cb * dx + cc * dy);
        a[2] += -0.5 * d_g * g * dx * dx;
        a[3] += -d_g * g * dx * dy;
        a[4] += -0.5 * d_g * g * dy * dy;
    }
}

/// d R(q) / d q_k for the standard unit-quaternion matrix polynomial.
fn rotation_partials(q: &[f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = *q;
    [
        Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0),
        Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x),
        Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y),
        Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0),
    ]
}

fn projection_backward(
    g: &GaussianPrimitive,
    view: &ViewCamera,
    p: &Projected,
    g2: &Grad2d,
) -> PrimitiveGrad {
    let mut out = PrimitiveGrad::default();
    if g2.iter().all(|v| *v == 0.0) {
        return out;
    }
    let cam = &view.camera;
    let w = view.world_to_camera.rotation.matrix();
    let t = view.world_to_camera.transform_point(&g.mean);
    let r = g.rotation.matrix();
    let s = g.scales();
    let m = r * Matrix3::from_diagonal(&s);
    let cov = m * m.transpose();
    let cov_c = w * cov * w.transpose();
    let j = projection_jacobian(cam, &t);

    // conic -> 2D covariance
    let conic = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let g_conic = Matrix2::new(g2[2], 0.5 * g2[3], 0.5 * g2[3], g2[4]);
    let g_cov2d = -conic * g_conic * conic;

    // 2D covariance -> camera covariance and projection Jacobian
    let g_cov_c = j.transpose() * g_cov2d * j;
    let g_j = 2.0 * g_cov2d * j * cov_c;
    let g_cov = w.transpose() * g_cov_c * w;

    // camera-frame mean from J and mean2d
    let (x, y, z) = (t.x, t.y, t.z);
    let iz2 = 1.0 / (z * z);
    let iz3 = iz2 / z;
    let mut g_t = Vector3::new(
        g_j[(0, 2)] * (-cam.fx * iz2),
        g_j[(1, 2)] * (-cam.fy * iz2),
        g_j[(0, 0)] * (-cam.fx * iz2)
            + g_j[(0, 2)] * (2.0 * cam.fx * x * iz3)
            + g_j[(1, 1)] * (-cam.fy * iz2)
            + g_j[(1, 2)] * (2.0 * cam.fy * y * iz3),
    );
    g_t.x += g2[0] * cam.fx / z;
    g_t.y += g2[1] * cam.fy / z;
    g_t.z += -g2[0] * cam.fx * x * iz2 - g2[1] * cam.fy * y * iz2;
    out.mean = w.transpose() * g_t;

    // covariance -> rotation and scales
    let g_m = 2.0 * g_cov * m;
    let mut g_r = g_m * Matrix3::from_diagonal(&s);
    for k in 0..3 {
        let g_s = g_m.column(k).dot(&r.column(k));
        out.log_scales[k] = g_s * s[k];
    }

    // normal (camera frame) -> rotation column
    let g_n_c = Vector3::new(g2[9], g2[10], g2[11]);
    if g_n_c != Vector3::zeros() {
        let axis = g.minor_axis();
        let n_w = r.column(axis).into_owned();
        let n_c = w * n_w;
        let sign = if n_c.dot(&p.normal) < 0.0 { -1.0 } else { 1.0 };
        let g_col = sign * (w.transpose() * g_n_c);
        let mut col = g_r.column_mut(axis);
        col += g_col;
    }

    // rotation matrix -> quaternion through normalisation
    let q = g.rotation.wxyz();
    let partials = rotation_partials(&q);
    let g_qhat = Vector4::from_iterator(partials.iter().map(|d| d.component_mul(&g_r).sum()));
    let qv = Vector4::from(q);
    out.rotation = (g_qhat - qv * qv.dot(&g_qhat)) / qv.norm();

    // opacity
    let o = p.opacity;
    out.opacity_logit = g2[5] * o * (1.0 - o);

    // color -> SH coefficients and view direction
    let center = view.center();
    let v = center - g.mean;
    let vn = v.norm();
    let d = v / vn;
    let basis = sh_basis(&d);
    let raw = g.sh_color(&d);
    let mut g_d = Vector3::zeros();
    for c in 0..3 {
        if raw[c] <= 0.0 || raw[c] >= 1.0 {
            continue;
        }
        let gc = g2[6 + c];
        for (k, b) in basis.iter().enumerate() {
            out.sh[k * 3 + c] = gc * b;
        }
        g_d.x += -gc * SH_C1 * g.sh[9 + c];
        g_d.y += -gc * SH_C1 * g.sh[3 + c];
        g_d.z += gc * SH_C1 * g.sh[6 + c];
    }
    let g_v = (g_d - d * d.dot(&g_d)) / vn;
    out.mean -= g_v;
    out
}

/// Applies the rigid transform `tf` (new world <- old world) to every
/// primitive, rotating the degree-1 SH bands so view-dependent color is
/// preserved.
pub fn transform_scene(scene: &[GaussianPrimitive], tf: &SE3Pose) -> Vec<GaussianPrimitive> {
    let rm = tf.rotation.matrix();
    scene
        .iter()
        .map(|g| {
            let mut out = g.clone();
            out.mean = tf.transform_point(&g.mean);
            out.rotation = tf.rotation * g.rotation;
            for c in 0..3 {
                // band 1 acts as C1 * d . (-k3, -k1, k2)
                let v = Vector3::new(-g.sh[9 + c], -g.sh[3 + c], g.sh[6 + c]);
                let v2 = rm * v;
                out.sh[3 + c] = -v2.y;
                out.sh[6 + c] = v2.z;
                out.sh[9 + c] = -v2.x;
            }
            out
        })
        .collect()
}

/// The same view expressed in the transformed world.
pub fn transform_view(view: &ViewCamera, tf: &SE3Pose) -> ViewCamera {
    ViewCamera {
        camera: view.camera,
        world_to_camera: se3_compose(&view.world_to_camera, &se3_inverse(tf)),
    }
}

/// Random primitives in front of a camera at the origin looking down `+z`,
/// with 2D footprints of a few pixels at `fx ~ 20`. Used by gradient checks.
pub fn random_scene<R: Rng>(rng: &mut R, n: usize) -> Vec<GaussianPrimitive> {
    (0..n)
        .map(|_| {
            let mut sh = [0.0; 12];
            for v in sh.iter_mut() {
                *v = rng.random_range(-0.4..0.4);
            }
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            GaussianPrimitive {
                mean: Vector3::new(
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(1.5..3.0),
                ),
                log_scales: Vector3::new(
                    rng.random_range(-2.5..-1.2),
                    rng.random_range(-2.5..-1.2),
                    rng.random_range(-2.5..-1.2),
                ),
                rotation: crate::lie::so3_exp(&axis).expect("finite axis"),
                opacity_logit: rng.random_range(-1.0..1.5),
                sh,
            }
        })
        .collect()
}
