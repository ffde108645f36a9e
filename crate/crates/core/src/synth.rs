//! Synthetic worlds with known ground truth.
//!
//! Three fixed layouts are available:
//!
//! * `circle_room`: ten cameras on a horizontal circle looking outward at the
//!   wall of a cylindrical room scattered with point landmarks.
//! * `corridor`: twenty cameras translating along a wall whose texture repeats
//!   with a fixed period. A subset of cameras has every correspondence
//!   assigned to the landmark one period away, so their images are explained
//!   equally well by a pose shifted by that period.
//! * `planar_board`: sixteen oblique views of a textured planar board made of
//!   flat Gaussians, used for training benchmarks.
//!
//! A rig carries a LiDAR and a camera related by a fixed extrinsic. The
//! LiDAR trajectory is sampled at twice the image rate (every sample for the
//! board); images are taken at even samples.
//!
//! Generation is a pure function of `(spec, seed)`. [`observe`] adds seeded
//! Gaussian noise to pixels, priors and the odometry trajectory; rendered
//! targets always come from the ground-truth poses.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, ColmapCamera, ColmapImage, ColmapModel, ColmapPoint};
use crate::lie::{se3_compose, se3_inverse, so3_exp, Rotation, SE3Pose};
use crate::posegraph::{
    triangulate_dlt, Camera, Landmark, Observation, Problem, RelativeMeasurement,
    TriangulationConfig,
};
use crate::raster::Image;
use crate::splat::{render, GaussianPrimitive, ViewCamera};
use crate::traj::{camera_priors, isotropic_information, save_tum, Extrinsic, PosePrior, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldSpec {
    CircleRoom,
    Corridor,
    PlanarBoard,
}

impl WorldSpec {
    pub const ALL: [WorldSpec; 3] = [WorldSpec::CircleRoom, WorldSpec::Corridor, WorldSpec::PlanarBoard];

    pub fn name(&self) -> &'static str {
        match self {
            WorldSpec::CircleRoom => "circle_room",
            WorldSpec::Corridor => "corridor",
            WorldSpec::PlanarBoard => "planar_board",
        }
    }
}

impl fmt::Display for WorldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WorldSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WorldSpec::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::UnknownWorld(s.to_string()))
    }
}

/// Standard deviations of the simulated sensor noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Per-axis pixel noise.
    pub sigma_pixel: f64,
    /// Per-axis prior translation noise, meters.
    pub sigma_prior_t: f64,
    /// Per-axis prior rotation noise, degrees.
    pub sigma_prior_r_deg: f64,
}

impl NoiseParams {
    pub fn zero() -> Self {
        Self {
            sigma_pixel: 0.0,
            sigma_prior_t: 0.0,
            sigma_prior_r_deg: 0.0,
        }
    }
}

/// Analytic scene geometry used for normal maps.
#[derive(Clone, Debug, PartialEq)]
pub enum Surface {
    /// Rectangle centred at `origin` spanned by `±half_u * u` and `±half_v * v`.
    Rectangle {
        origin: Vector3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
        half_u: f64,
        half_v: f64,
    },
    /// Vertical cylinder around the z axis.
    Cylinder { radius: f64, z_min: f64, z_max: f64 },
}

impl Surface {
    /// Nearest positive ray parameter and the unit surface normal there.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        match self {
            Surface::Rectangle {
                origin,
                u,
                v,
                half_u,
                half_v,
            } => {
                let n = u.cross(v).normalize();
                let den = d.dot(&n);
                if den.abs() < 1e-12 {
                    return None;
                }
                let t = (origin - o).dot(&n) / den;
                if t <= 0.0 {
                    return None;
                }
                let q = o + d * t - origin;
                (q.dot(u).abs() <= *half_u && q.dot(v).abs() <= *half_v).then_some((t, n))
            }
            Surface::Cylinder {
                radius,
                z_min,
                z_max,
            } => {
                let a = d.x * d.x + d.y * d.y;
                if a < 1e-15 {
                    return None;
                }
                let b = 2.0 * (o.x * d.x + o.y * d.y);
                let c = o.x * o.x + o.y * o.y - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = [(-b - s) / (2.0 * a), (-b + s) / (2.0 * a)]
                    .into_iter()
                    .filter(|&t| t > 0.0)
                    .find(|&t| {
                        let z = o.z + d.z * t;
                        z >= *z_min && z <= *z_max
                    })?;
                let p = o + d * t;
                Some((t, Vector3::new(p.x, p.y, 0.0) / *radius))
            }
        }
    }
}

/// One landmark visible in one image. `label` is the landmark the
/// correspondence is attributed to; it differs from `landmark` for aliased
/// matches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sighting {
    pub landmark: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub seed: u64,
    pub noise: NoiseParams,
    pub camera: Camera,
    pub extrinsic: Extrinsic,
    /// Ground-truth world <- lidar trajectory.
    pub lidar: Trajectory,
    pub camera_times: Vec<f64>,
    /// Ground-truth world <- camera poses, timestamped.
    pub poses: Vec<SE3Pose>,
    pub landmarks: Vec<Vector3<f64>>,
    pub colors: Vec<[f64; 3]>,
    /// Per image, the visible landmarks.
    pub sightings: Vec<Vec<Sighting>>,
    pub scene: Vec<GaussianPrimitive>,
    pub surfaces: Vec<Surface>,
}

impl SyntheticWorld {
    pub fn with_noise(mut self, noise: NoiseParams) -> Self {
        self.noise = noise;
        self
    }

    /// Fraction of correspondences attributed to the wrong landmark.
    pub fn ambiguous_fraction(&self) -> f64 {
        let (mut bad, mut total) = (0usize, 0usize);
        for s in self.sightings.iter().flatten() {
            total += 1;
            bad += usize::from(s.label != s.landmark);
        }
        if total == 0 {
            0.0
        } else {
            bad as f64 / total as f64
        }
    }

    pub fn image_name(&self, k: usize) -> String {
        format!("cam_{k:03}.png")
    }

    pub fn view(&self, k: usize) -> Result<ViewCamera> {
        ViewCamera::from_pose(self.camera, &self.poses[k])
    }

    /// World-frame hit point and unit normal of the nearest analytic surface
    /// along the ray through the centre of pixel `(x, y)` of image `k`.
    pub fn cast(&self, k: usize, x: usize, y: usize) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let cam = &self.camera;
        let pose = &self.poses[k];
        let dc = Vector3::new(
            (x as f64 + 0.5 - cam.cx) / cam.fx,
            (y as f64 + 0.5 - cam.cy) / cam.fy,
            1.0,
        );
        let o = pose.translation;
        let d = pose.rotation.matrix() * dc;
        self.surfaces
            .iter()
            .filter_map(|s| s.intersect(&o, &d))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(t, n)| (o + d * t, if n.dot(&d) > 0.0 { -n } else { n }))
    }

    /// Unit normals (camera frame, facing the camera) of the analytic
    /// surfaces seen through each pixel of image `k`; `(0, 0, -1)` where no
    /// surface is hit.
    pub fn normal_map(&self, k: usize) -> Image {
        let rt = self.poses[k].rotation.matrix().transpose();
        let (w, h) = (self.camera.width as usize, self.camera.height as usize);
        let mut img = Image::new(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                let n = match self.cast(k, x, y) {
                    Some((_, n)) => rt * n,
                    None => Vector3::new(0.0, 0.0, -1.0),
                };
                for c in 0..3 {
                    img.set(x, y, c, n[c]);
                }
            }
        }
        img
    }
}

// ---------------------------------------------------------------------------
// construction

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Camera looking from `eye` toward `target`, with image y pointing away
/// from world +z.
fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> SE3Pose {
    let z = (target - eye).normalize();
    let x = z.cross(&Vector3::z()).normalize();
    let y = z.cross(&x);
    SE3Pose::new(Rotation::from_matrix(&Matrix3::from_columns(&[x, y, z])), eye)
}

fn default_camera() -> Camera {
    Camera {
        fx: 48.0,
        fy: 48.0,
        cx: 32.0,
        cy: 24.0,
        width: 64,
        height: 48,
    }
}

/// lidar <- camera: lidar x forward, z up; camera z forward, y down.
fn default_extrinsic() -> Extrinsic {
    let r = Matrix3::from_columns(&[
        Vector3::new(0.0, -1.0, 0.0),
        Vector3::new(0.0, 0.0, -1.0),
        Vector3::new(1.0, 0.0, 0.0),
    ]);
    Extrinsic(SE3Pose::new(
        Rotation::from_matrix(&r),
        Vector3::new(0.05, -0.02, 0.08),
    ))
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

fn timed(mut p: SE3Pose, t: f64) -> SE3Pose {
    p.timestamp = Some(t);
    p
}

/// Builds the lidar trajectory from a world <- lidar pose function, sampled
/// every `dt`, with cameras on even samples.
fn rig_from_lidar(
    n_cameras: usize,
    dt: f64,
    ext: &Extrinsic,
    lidar_at: impl Fn(f64) -> SE3Pose,
) -> Result<(Trajectory, Vec<f64>, Vec<SE3Pose>)> {
    let samples: Vec<SE3Pose> = (0..2 * n_cameras - 1)
        .map(|i| {
            let t = i as f64 * dt;
            timed(lidar_at(t), t)
        })
        .collect();
    let lidar = Trajectory::new(samples, "lidar")?;
    let mut times = Vec::with_capacity(n_cameras);
    let mut poses = Vec::with_capacity(n_cameras);
    for k in 0..n_cameras {
        let s = &lidar.samples()[2 * k];
        let t = s.timestamp.expect("timestamped");
        times.push(t);
        poses.push(timed(se3_compose(s, &ext.0), t));
    }
    Ok((lidar, times, poses))
}

fn lidar_facing(position: Vector3<f64>, forward: Vector3<f64>) -> SE3Pose {
    let x = forward.normalize();
    let z = Vector3::z();
    let y = z.cross(&x);
    SE3Pose::new(Rotation::from_matrix(&Matrix3::from_columns(&[x, y, z])), position)
}

fn visible(cam: &Camera, pose: &SE3Pose, x: &Vector3<f64>) -> bool {
    let pc = se3_inverse(pose).transform_point(x);
    if pc.z < 0.1 {
        return false;
    }
    cam.project(&pc).is_some_and(|uv| {
        uv.x >= 1.0 && uv.y >= 1.0 && uv.x <= cam.width as f64 - 1.0 && uv.y <= cam.height as f64 - 1.0
    })
}

fn direct_sightings(cam: &Camera, poses: &[SE3Pose], landmarks: &[Vector3<f64>]) -> Vec<Vec<Sighting>> {
    poses
        .iter()
        .map(|p| {
            (0..landmarks.len())
                .filter(|&l| visible(cam, p, &landmarks[l]))
                .map(|l| Sighting { landmark: l, label: l })
                .collect()
        })
        .collect()
}

fn point_scene(landmarks: &[Vector3<f64>], colors: &[[f64; 3]]) -> Vec<GaussianPrimitive> {
    landmarks
        .iter()
        .zip(colors)
        .map(|(x, c)| GaussianPrimitive::isotropic(*x, 0.03, 0.9, *c))
        .collect()
}

const ROOM_RADIUS: f64 = 4.0;
const ROOM_HALF_HEIGHT: f64 = 1.5;
const CIRCLE_RADIUS: f64 = 1.0;
const CIRCLE_CAMERAS: usize = 10;

fn circle_room(seed: u64) -> Result<SyntheticWorld> {
    let mut rng = rng_for(seed, 0);
    let camera = default_camera();
    let extrinsic = default_extrinsic();
    let dt = 0.05;
    let period = dt * (2 * CIRCLE_CAMERAS) as f64;
    let (lidar, camera_times, poses) = rig_from_lidar(CIRCLE_CAMERAS, dt, &extrinsic, |t| {
        let th = std::f64::consts::TAU * t / period;
        let out = Vector3::new(th.cos(), th.sin(), 0.0);
        lidar_facing(out * CIRCLE_RADIUS, out)
    })?;
    let n_landmarks = 300;
    let mut landmarks = Vec::with_capacity(n_landmarks);
    let mut colors = Vec::with_capacity(n_landmarks);
    for _ in 0..n_landmarks {
        let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let z: f64 = rng.random_range(-1.0..1.0);
        landmarks.push(Vector3::new(ROOM_RADIUS * th.cos(), ROOM_RADIUS * th.sin(), z));
        colors.push(random_color(&mut rng));
    }
    let sightings = direct_sightings(&camera, &poses, &landmarks);
    let cap = |z: f64| Surface::Rectangle {
        origin: Vector3::new(0.0, 0.0, z),
        u: Vector3::x(),
        v: Vector3::y(),
        half_u: ROOM_RADIUS,
        half_v: ROOM_RADIUS,
    };
    Ok(SyntheticWorld {
        spec: WorldSpec::CircleRoom,
        seed,
        noise: NoiseParams {
            sigma_pixel: 0.5,
            sigma_prior_t: 0.05,
            sigma_prior_r_deg: 1.0,
        },
        camera,
        extrinsic,
        lidar,
        camera_times,
        poses,
        scene: point_scene(&landmarks, &colors),
        landmarks,
        colors,
        sightings,
        surfaces: vec![
            Surface::Cylinder {
                radius: ROOM_RADIUS,
                z_min: -ROOM_HALF_HEIGHT,
                z_max: ROOM_HALF_HEIGHT,
            },
            cap(-ROOM_HALF_HEIGHT),
            cap(ROOM_HALF_HEIGHT),
        ],
    })
}

/// Texture period of the corridor wall, meters.
pub const CORRIDOR_PERIOD: f64 = 0.5;
const CORRIDOR_CAMERAS: usize = 20;
const CORRIDOR_STEP: f64 = 0.25;
const CORRIDOR_WALL: f64 = 2.0;
const CORRIDOR_SLOTS: usize = 4;
const CORRIDOR_MIN_AMBIGUOUS: f64 = 0.3;

fn corridor(seed: u64) -> Result<SyntheticWorld> {
    let mut rng = rng_for(seed, 0);
    let camera = default_camera();
    let extrinsic = default_extrinsic();
    let dt = 0.05;
    let (lidar, camera_times, poses) = rig_from_lidar(CORRIDOR_CAMERAS, dt, &extrinsic, |t| {
        let x = CORRIDOR_STEP * t / (2.0 * dt);
        lidar_facing(Vector3::new(x, 0.0, 0.0), Vector3::y())
    })?;

    // one period of texture, repeated along the wall
    let slots: Vec<(Vector3<f64>, [f64; 3])> = (0..CORRIDOR_SLOTS)
        .map(|s| {
            let dx = (s as f64 + rng.random_range(0.1..0.9)) * CORRIDOR_PERIOD / CORRIDOR_SLOTS as f64;
            let dy: f64 = rng.random_range(-0.15..0.15);
            let z: f64 = rng.random_range(-0.9..0.9);
            (Vector3::new(dx, CORRIDOR_WALL + dy, z), random_color(&mut rng))
        })
        .collect();
    let x_end = CORRIDOR_STEP * (CORRIDOR_CAMERAS - 1) as f64;
    let first_period = -8i64;
    let n_periods = ((x_end + 4.0) / CORRIDOR_PERIOD).ceil() as i64 + 8;
    let mut landmarks = Vec::new();
    let mut colors = Vec::new();
    for m in 0..n_periods {
        for (x, c) in &slots {
            let shift = (first_period + m) as f64 * CORRIDOR_PERIOD;
            landmarks.push(x + Vector3::new(shift, 0.0, 0.0));
            colors.push(*c);
        }
    }
    let mut sightings = direct_sightings(&camera, &poses, &landmarks);

    // Alias whole cameras until the required fraction of matches is wrong.
    let stride = CORRIDOR_SLOTS as i64;
    let mut order: Vec<usize> = (1..CORRIDOR_CAMERAS).collect();
    order.shuffle(&mut rng);
    let total: usize = sightings.iter().map(Vec::len).sum();
    let mut aliased = 0usize;
    for k in order {
        if aliased as f64 >= CORRIDOR_MIN_AMBIGUOUS * total as f64 {
            break;
        }
        let shift: i64 = if rng.random_bool(0.5) { 1 } else { -1 };
        for s in &mut sightings[k] {
            let label = s.landmark as i64 + shift * stride;
            assert!(label >= 0 && (label as usize) < landmarks.len(), "corridor margin too small");
            s.label = label as usize;
        }
        aliased += sightings[k].len();
    }

    let span = n_periods as f64 * CORRIDOR_PERIOD / 2.0;
    Ok(SyntheticWorld {
        spec: WorldSpec::Corridor,
        seed,
        noise: NoiseParams {
            sigma_pixel: 0.5,
            sigma_prior_t: 0.01,
            sigma_prior_r_deg: 0.1,
        },
        camera,
        extrinsic,
        lidar,
        camera_times,
        poses,
        scene: point_scene(&landmarks, &colors),
        landmarks,
        colors,
        sightings,
        surfaces: vec![Surface::Rectangle {
            origin: Vector3::new(first_period as f64 * CORRIDOR_PERIOD + span, CORRIDOR_WALL, 0.0),
            u: Vector3::x(),
            v: Vector3::z(),
            half_u: span,
            half_v: 1.5,
        }],
    })
}

const BOARD_HALF_X: f64 = 1.0;
const BOARD_HALF_Y: f64 = 1.0;
const BOARD_SQUARE: f64 = 0.25;
const BOARD_CAMERAS: usize = 16;

struct BoardTexture {
    colors: Vec<[f64; 3]>,
    nx: usize,
}

impl BoardTexture {
    fn new(rng: &mut impl Rng) -> Self {
        let nx = (2.0 * BOARD_HALF_X / BOARD_SQUARE).round() as usize;
        let ny = (2.0 * BOARD_HALF_Y / BOARD_SQUARE).round() as usize;
        let colors = (0..nx * ny)
            .map(|k| {
                let (i, j) = (k % nx, k / nx);
                let base = if (i + j) % 2 == 0 { 0.8 } else { 0.2 };
                let c = random_color(rng);
                [0.5 * base + 0.5 * c[0], 0.5 * base + 0.5 * c[1], 0.5 * base + 0.5 * c[2]]
            })
            .collect();
        Self { colors, nx }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let ny = self.colors.len() / self.nx;
        let i = (((x + BOARD_HALF_X) / BOARD_SQUARE).floor().max(0.0) as usize).min(self.nx - 1);
        let j = (((y + BOARD_HALF_Y) / BOARD_SQUARE).floor().max(0.0) as usize).min(ny - 1);
        self.colors[j * self.nx + i]
    }
}

fn planar_board(seed: u64) -> Result<SyntheticWorld> {
    let mut rng = rng_for(seed, 0);
    // narrower field of view so that the board fills every image
    let camera = Camera {
        fx: 80.0,
        fy: 80.0,
        ..default_camera()
    };
    let extrinsic = default_extrinsic();
    let texture = BoardTexture::new(&mut rng);

    let dt = 0.1;
    let mut poses = Vec::with_capacity(BOARD_CAMERAS);
    let mut lidar_samples = Vec::with_capacity(BOARD_CAMERAS);
    let mut camera_times = Vec::with_capacity(BOARD_CAMERAS);
    let ext_inv = se3_inverse(&extrinsic.0);
    for k in 0..BOARD_CAMERAS {
        let t = k as f64 * dt;
        let az = std::f64::consts::TAU * k as f64 / BOARD_CAMERAS as f64 + rng.random_range(-0.1..0.1);
        let el = rng.random_range(68f64..82.0).to_radians();
        let dist = rng.random_range(1.2..1.35);
        let eye = Vector3::new(dist * el.cos() * az.cos(), dist * el.cos() * az.sin(), dist * el.sin());
        let target = Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 0.0);
        let pose = timed(look_at(eye, target), t);
        lidar_samples.push(timed(se3_compose(&pose, &ext_inv), t));
        poses.push(pose);
        camera_times.push(t);
    }
    let lidar = Trajectory::new(lidar_samples, "lidar")?;

    // ground-truth appearance: a dense grid of flat disks
    let (gx, gy) = (24usize, 24usize);
    let mut scene = Vec::with_capacity(gx * gy);
    for j in 0..gy {
        for i in 0..gx {
            let x = -BOARD_HALF_X + (i as f64 + 0.5) * 2.0 * BOARD_HALF_X / gx as f64;
            let y = -BOARD_HALF_Y + (j as f64 + 0.5) * 2.0 * BOARD_HALF_Y / gy as f64;
            let mut g = GaussianPrimitive::isotropic(Vector3::new(x, y, 0.0), 0.045, 0.98, texture.at(x, y));
            g.log_scales.z = 0.002f64.ln();
            scene.push(g);
        }
    }

    // landmarks double as the initial point cloud: a jittered grid with colors
    let (lx, ly) = (20usize, 20usize);
    let mut landmarks = Vec::with_capacity(lx * ly);
    let mut colors = Vec::with_capacity(lx * ly);
    let cell = (2.0 * BOARD_HALF_X / lx as f64, 2.0 * BOARD_HALF_Y / ly as f64);
    for j in 0..ly {
        for i in 0..lx {
            let x = -BOARD_HALF_X + (i as f64 + rng.random_range(0.25..0.75)) * cell.0;
            let y = -BOARD_HALF_Y + (j as f64 + rng.random_range(0.25..0.75)) * cell.1;
            landmarks.push(Vector3::new(x, y, 0.0));
            colors.push(texture.at(x, y));
        }
    }
    let sightings = direct_sightings(&camera, &poses, &landmarks);

    Ok(SyntheticWorld {
        spec: WorldSpec::PlanarBoard,
        seed,
        noise: NoiseParams {
            sigma_pixel: 0.5,
            sigma_prior_t: 0.01,
            sigma_prior_r_deg: 0.1,
        },
        camera,
        extrinsic,
        lidar,
        camera_times,
        poses,
        landmarks,
        colors,
        sightings,
        scene,
        surfaces: vec![Surface::Rectangle {
            origin: Vector3::zeros(),
            u: Vector3::x(),
            v: Vector3::y(),
            half_u: BOARD_HALF_X,
            half_v: BOARD_HALF_Y,
        }],
    })
}

pub fn make_world(spec: WorldSpec, seed: u64) -> Result<SyntheticWorld> {
    match spec {
        WorldSpec::CircleRoom => circle_room(seed),
        WorldSpec::Corridor => corridor(seed),
        WorldSpec::PlanarBoard => planar_board(seed),
    }
}

/// [`make_world`] by name, e.g. `"corridor"`.
pub fn make_world_named(name: &str, seed: u64) -> Result<SyntheticWorld> {
    make_world(name.parse()?, seed)
}

// ---------------------------------------------------------------------------
// observation

#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    /// Per image, `(landmark label, pixel)`.
    pub pixels: Vec<Vec<(usize, Vector2<f64>)>>,
    /// Noisy world <- lidar odometry.
    pub lidar: Trajectory,
    /// Camera priors interpolated from `lidar`, one per image.
    pub priors: Vec<SE3Pose>,
    pub images: Vec<Image>,
    pub normals: Vec<Image>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ObserveOptions {
    /// Render target images and normal maps.
    pub render: bool,
}

impl Default for ObserveOptions {
    fn default() -> Self {
        Self { render: true }
    }
}

fn gaussian(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma is finite and non-negative")
}

fn perturb(p: &SE3Pose, noise: &NoiseParams, rng: &mut impl Rng) -> Result<SE3Pose> {
    let nr = gaussian(noise.sigma_prior_r_deg.to_radians());
    let nt = gaussian(noise.sigma_prior_t);
    let dr = Vector3::new(nr.sample(rng), nr.sample(rng), nr.sample(rng));
    let dt = Vector3::new(nt.sample(rng), nt.sample(rng), nt.sample(rng));
    Ok(SE3Pose {
        rotation: p.rotation * so3_exp(&dr)?,
        translation: p.translation + dt,
        timestamp: p.timestamp,
    })
}

pub fn observe(world: &SyntheticWorld) -> Result<Observations> {
    observe_with(world, ObserveOptions::default())
}

pub fn observe_with(world: &SyntheticWorld, opts: ObserveOptions) -> Result<Observations> {
    let noise = &world.noise;
    if !(noise.sigma_pixel >= 0.0 && noise.sigma_prior_t >= 0.0 && noise.sigma_prior_r_deg >= 0.0) {
        return Err(Error::InvalidArgument("noise sigmas must be non-negative".into()));
    }

    let mut rng = rng_for(world.seed, 1);
    let npx = gaussian(noise.sigma_pixel);
    let inv: Vec<SE3Pose> = world.poses.iter().map(se3_inverse).collect();
    let pixels = world
        .sightings
        .iter()
        .enumerate()
        .map(|(k, list)| {
            list.iter()
                .map(|s| {
                    let pc = inv[k].transform_point(&world.landmarks[s.landmark]);
                    let uv = world.camera.project(&pc).expect("sighting is in front of the camera");
                    (s.label, uv + Vector2::new(npx.sample(&mut rng), npx.sample(&mut rng)))
                })
                .collect()
        })
        .collect();

    // Odometry: camera-time samples carry the perturbed camera pose, the
    // samples in between are perturbed independently.
    let mut rng = rng_for(world.seed, 2);
    let ext_inv = se3_inverse(&world.extrinsic.0);
    let mut cam_k = 0;
    let mut samples = Vec::with_capacity(world.lidar.len());
    for s in world.lidar.samples() {
        let t = s.timestamp.expect("timestamped");
        let noisy = if cam_k < world.camera_times.len() && world.camera_times[cam_k] == t {
            let c = perturb(&world.poses[cam_k], noise, &mut rng)?;
            cam_k += 1;
            se3_compose(&c, &ext_inv)
        } else {
            perturb(s, noise, &mut rng)?
        };
        samples.push(timed(noisy, t));
    }
    let lidar = Trajectory::new(samples, "lidar")?;
    let ids: Vec<(usize, f64)> = world.camera_times.iter().copied().enumerate().collect();
    let (priors, dropped) = camera_priors(&lidar, &world.extrinsic, &ids)?;
    if !dropped.is_empty() {
        return Err(Error::InvalidArgument(format!("{} images lie outside the odometry", dropped.len())));
    }
    let priors = priors.into_iter().map(|p| p.pose).collect();

    let (images, normals) = if opts.render {
        let mut images = Vec::with_capacity(world.poses.len());
        let mut normals = Vec::with_capacity(world.poses.len());
        for k in 0..world.poses.len() {
            images.push(render(&world.scene, &world.view(k)?).color);
            normals.push(world.normal_map(k));
        }
        (images, normals)
    } else {
        (Vec::new(), Vec::new())
    };

    Ok(Observations {
        pixels,
        lidar,
        priors,
        images,
        normals,
    })
}

// ---------------------------------------------------------------------------
// problems

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RelativeSource {
    None,
    /// Exact relative motion between consecutive ground-truth poses.
    GroundTruth,
    /// Relative motion between consecutive priors.
    Priors,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LandmarkInit {
    /// Ground-truth positions, held constant.
    FixedGroundTruth,
    /// DLT from the initial poses; rejected landmarks are dropped.
    Triangulate(TriangulationConfig),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProblemOptions {
    /// `(rotation, translation)` information weights, or no prior terms.
    pub prior_weights: Option<(f64, f64)>,
    pub relatives: RelativeSource,
    pub relative_weights: (f64, f64),
    pub landmarks: LandmarkInit,
    /// Hold pose 0 constant.
    pub fix_gauge: bool,
}

impl ProblemOptions {
    /// Priors weighted by the world's noise level, exact relatives, and
    /// landmarks triangulated without a reprojection gate.
    pub fn for_world(world: &SyntheticWorld) -> Self {
        let sr = world.noise.sigma_prior_r_deg.to_radians().max(1e-3);
        let st = world.noise.sigma_prior_t.max(1e-3);
        Self {
            prior_weights: Some((1.0 / (sr * sr), 1.0 / (st * st))),
            relatives: RelativeSource::GroundTruth,
            relative_weights: (1e6, 1e6),
            landmarks: LandmarkInit::Triangulate(TriangulationConfig {
                max_reprojection_error_px: f64::INFINITY,
                min_angle_deg: 1.0,
            }),
            fix_gauge: false,
        }
    }

    /// Reprojection terms only, pose 0 fixed.
    pub fn visual_only(mut self) -> Self {
        self.prior_weights = None;
        self.relatives = RelativeSource::None;
        self.fix_gauge = true;
        self
    }
}

/// Assembles a refinement problem initialised at the priors.
pub fn build_problem(world: &SyntheticWorld, obs: &Observations, opts: &ProblemOptions) -> Result<Problem> {
    let n = world.poses.len();
    if obs.priors.len() != n || obs.pixels.len() != n {
        return Err(Error::DimensionMismatch("observations do not match the world".into()));
    }
    let mut p = Problem::new(vec![world.camera], obs.priors.clone(), vec![0; n]);
    let mut landmarks: Vec<Landmark> = world
        .landmarks
        .iter()
        .map(|x| Landmark::new(*x, Vec::new()))
        .collect();
    for (k, list) in obs.pixels.iter().enumerate() {
        for &(label, uv) in list {
            landmarks[label].observations.push(Observation { pose: k, uv });
        }
    }
    match opts.landmarks {
        LandmarkInit::FixedGroundTruth => {
            for l in &mut landmarks {
                l.fixed = true;
            }
            p.landmarks = landmarks;
        }
        LandmarkInit::Triangulate(cfg) => {
            for l in &mut landmarks {
                l.position = Vector3::zeros();
            }
            p.landmarks = landmarks;
            p.triangulate_landmarks(&cfg);
        }
    }
    if let Some((wr, wt)) = opts.prior_weights {
        p.priors = obs
            .priors
            .iter()
            .enumerate()
            .map(|(k, pose)| PosePrior::with_weights(k, *pose, wr, wt))
            .collect();
    }
    let (wr, wt) = opts.relative_weights;
    let chain = match opts.relatives {
        RelativeSource::None => None,
        RelativeSource::GroundTruth => Some(&world.poses),
        RelativeSource::Priors => Some(&obs.priors),
    };
    if let Some(poses) = chain {
        let info = isotropic_information(wr, wt);
        p.relatives = (1..n)
            .map(|k| RelativeMeasurement::between(k - 1, k, &poses[k - 1], &poses[k], info))
            .collect::<Result<_>>()?;
    }
    if opts.fix_gauge {
        p.fix_gauge();
    }
    p.validate()?;
    Ok(p)
}

/// Root-mean-square position error between matching pose lists.
pub fn trajectory_rmse(estimate: &[SE3Pose], truth: &[SE3Pose]) -> f64 {
    assert_eq!(estimate.len(), truth.len(), "pose lists differ in length");
    if truth.is_empty() {
        return 0.0;
    }
    let s: f64 = estimate
        .iter()
        .zip(truth)
        .map(|(a, b)| (a.translation - b.translation).norm_squared())
        .sum();
    (s / truth.len() as f64).sqrt()
}

// ---------------------------------------------------------------------------
// files

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// COLMAP model with image poses at the priors and points triangulated from
/// them. Points that fail triangulation are omitted.
pub fn colmap_model(world: &SyntheticWorld, obs: &Observations) -> Result<ColmapModel> {
    let cfg = TriangulationConfig {
        max_reprojection_error_px: f64::INFINITY,
        min_angle_deg: 1.0,
    };
    let mut tracks: Vec<Vec<(usize, usize)>> = vec![Vec::new(); world.landmarks.len()];
    for (k, list) in obs.pixels.iter().enumerate() {
        for (i, &(label, _)) in list.iter().enumerate() {
            tracks[label].push((k, i));
        }
    }
    let mut point_id: Vec<Option<u64>> = vec![None; world.landmarks.len()];
    let mut points = Vec::new();
    for (l, track) in tracks.iter().enumerate() {
        let views: Vec<_> = track
            .iter()
            .map(|&(k, i)| (obs.priors[k], world.camera, obs.pixels[k][i].1))
            .collect();
        let Ok(xyz) = triangulate_dlt(&views, &cfg) else { continue };
        let id = l as u64 + 1;
        point_id[l] = Some(id);
        let c = world.colors[l];
        points.push(ColmapPoint {
            id,
            xyz,
            rgb: [to_u8(c[0]), to_u8(c[1]), to_u8(c[2])],
            error: 0.0,
            track: track.iter().map(|&(k, i)| (k as u32 + 1, i)).collect(),
        });
    }
    let images = obs
        .pixels
        .iter()
        .enumerate()
        .map(|(k, list)| ColmapImage {
            id: k as u32 + 1,
            world_to_camera: se3_inverse(&obs.priors[k]),
            camera_id: 1,
            name: world.image_name(k),
            points2d: list.iter().map(|&(label, uv)| (uv, point_id[label])).collect(),
        })
        .collect();
    let mut cameras = std::collections::BTreeMap::new();
    cameras.insert(
        1,
        ColmapCamera {
            id: 1,
            model: "PINHOLE".into(),
            camera: world.camera,
        },
    );
    Ok(ColmapModel {
        cameras,
        images,
        points,
    })
}

/// Formats an extrinsic as a single `tx ty tz qx qy qz qw` line.
pub fn format_extrinsic(e: &Extrinsic) -> String {
    let v = e.to_tuple();
    let fields: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("{}\n", fields.join(" "))
}

/// Writes a self-contained dataset:
///
/// ```text
/// lidar.tum              noisy odometry (world <- lidar)
/// extrinsic.txt          lidar <- camera, tx ty tz qx qy qz qw
/// camera_times.txt       image name and timestamp per line
/// sparse/                COLMAP text model initialised at the priors
/// images/*.png           rendered targets
/// normals/*.pfm          analytic normal maps
/// gt/poses.tum           ground-truth world <- camera
/// gt/scene.ply           ground-truth Gaussian scene
/// ```
pub fn write_dataset(world: &SyntheticWorld, obs: &Observations, dir: &Path) -> Result<()> {
    for sub in ["sparse", "images", "normals", "gt"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    save_tum(&dir.join("lidar.tum"), obs.lidar.samples())?;
    let ext = dir.join("extrinsic.txt");
    fs::write(&ext, format_extrinsic(&world.extrinsic)).map_err(|e| Error::io(&ext, e))?;
    let mut times = String::new();
    for (k, t) in world.camera_times.iter().enumerate() {
        times.push_str(&format!("{} {}\n", world.image_name(k), t));
    }
    let tp = dir.join("camera_times.txt");
    fs::write(&tp, times).map_err(|e| Error::io(&tp, e))?;
    colmap_model(world, obs)?.write(&dir.join("sparse"))?;
    for (k, img) in obs.images.iter().enumerate() {
        io::write_png_rgb(&dir.join("images").join(world.image_name(k)), img)?;
    }
    for (k, n) in obs.normals.iter().enumerate() {
        let name = world.image_name(k).replace(".png", ".pfm");
        io::write_pfm(&dir.join("normals").join(name), n)?;
    }
    save_tum(&dir.join("gt").join("poses.tum"), &world.poses)?;
    io::write_ply(&dir.join("gt").join("scene.ply"), &world.scene)?;
    Ok(())
}
