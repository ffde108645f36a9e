//! LiDAR-odometry trajectories and the camera pose priors derived from them.
//!
//! A trajectory holds world <- lidar poses. Camera priors are obtained by
//! interpolating it at the image timestamp (linear in translation, slerp in
//! rotation) and composing with the lidar <- camera extrinsic.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::{Matrix6, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lie::{quat_slerp, se3_compose, Rotation, SE3Pose};

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    samples: Vec<SE3Pose>,
    times: Vec<f64>,
    pub frame: String,
}

impl Trajectory {
    /// Every pose must carry a timestamp; timestamps must strictly increase.
    pub fn new(samples: Vec<SE3Pose>, frame: impl Into<String>) -> Result<Self> {
        let mut times = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let t = s
                .timestamp
                .ok_or_else(|| Error::InvalidArgument(format!("sample {i} has no timestamp")))?;
            if let Some(&prev) = times.last() {
                if t <= prev {
                    return Err(Error::InvalidArgument(format!(
                        "timestamps must strictly increase: sample {i} has {t} after {prev}"
                    )));
                }
            }
            times.push(t);
        }
        Ok(Self {
            samples,
            times,
            frame: frame.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[SE3Pose] {
        &self.samples
    }

    pub fn time_range(&self) -> Option<(f64, f64)> {
        Some((*self.times.first()?, *self.times.last()?))
    }

    /// Left-multiplies every sample by `world`.
    pub fn transformed(&self, world: &SE3Pose) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut p = se3_compose(world, s);
                p.timestamp = s.timestamp;
                p
            })
            .collect();
        Self {
            samples,
            times: self.times.clone(),
            frame: self.frame.clone(),
        }
    }

    /// Pose at time `t`; no extrapolation beyond the first/last sample.
    pub fn interpolate_pose(&self, t: f64) -> Result<SE3Pose> {
        if self.samples.len() < 2 {
            return Err(Error::TooFewSamples(self.samples.len()));
        }
        let (first, last) = (self.times[0], self.times[self.times.len() - 1]);
        if !(t >= first && t <= last) {
            return Err(Error::TimeOutOfRange { t, first, last });
        }
        // index of the first sample with time > t
        let hi = self.times.partition_point(|&s| s <= t);
        if hi > 0 && self.times[hi - 1] == t {
            return Ok(self.samples[hi - 1]);
        }
        let (a, b) = (&self.samples[hi - 1], &self.samples[hi]);
        let (ta, tb) = (self.times[hi - 1], self.times[hi]);
        let f = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
        Ok(SE3Pose {
            rotation: quat_slerp(&a.rotation, &b.rotation, f)?,
            translation: a.translation * (1.0 - f) + b.translation * f,
            timestamp: Some(t),
        })
    }
}

/// lidar <- camera transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extrinsic(pub SE3Pose);

impl Extrinsic {
    /// From `[tx, ty, tz, qx, qy, qz, qw]`, the TUM field order.
    pub fn from_tuple(v: [f64; 7]) -> Result<Self> {
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("extrinsic"));
        }
        let qn = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5] + v[6] * v[6]).sqrt();
        if qn < 1e-12 {
            return Err(Error::InvalidArgument("extrinsic quaternion is zero".into()));
        }
        Ok(Self(SE3Pose::new(
            Rotation::from_wxyz(v[6], v[3], v[4], v[5]),
            Vector3::new(v[0], v[1], v[2]),
        )))
    }

    pub fn to_tuple(&self) -> [f64; 7] {
        let [w, x, y, z] = self.0.rotation.wxyz();
        let t = self.0.translation;
        [t.x, t.y, t.z, x, y, z, w]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosePrior {
    pub camera_id: usize,
    /// world <- camera, `(R_0, p_0)`.
    pub pose: SE3Pose,
    /// Ordered `[rotation; translation]`, like every 6-residual in the crate.
    pub information: Matrix6<f64>,
}

impl PosePrior {
    pub fn new(camera_id: usize, pose: SE3Pose) -> Self {
        Self::with_weights(camera_id, pose, 1.0, 1.0)
    }

    pub fn with_weights(camera_id: usize, pose: SE3Pose, rotation: f64, translation: f64) -> Self {
        Self {
            camera_id,
            pose,
            information: isotropic_information(rotation, translation),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (0..6).any(|i| !(self.information[(i, i)] >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "prior for camera {} has negative information weight",
                self.camera_id
            )));
        }
        Ok(())
    }
}

pub fn isotropic_information(rotation: f64, translation: f64) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    for i in 0..3 {
        m[(i, i)] = rotation;
        m[(i + 3, i + 3)] = translation;
    }
    m
}

/// world <- camera prior at time `t`: interpolated world <- lidar composed with
/// the lidar <- camera extrinsic.
pub fn camera_prior(
    traj: &Trajectory,
    extrinsic: &Extrinsic,
    camera_id: usize,
    t: f64,
) -> Result<PosePrior> {
    let lidar = traj.interpolate_pose(t)?;
    let mut pose = se3_compose(&lidar, &extrinsic.0);
    pose.timestamp = Some(t);
    Ok(PosePrior::new(camera_id, pose))
}

/// Priors for many `(camera id, timestamp)` pairs. Cameras outside the
/// trajectory's time span are dropped with a warning and returned separately.
pub fn camera_priors(
    traj: &Trajectory,
    extrinsic: &Extrinsic,
    cameras: &[(usize, f64)],
) -> Result<(Vec<PosePrior>, Vec<usize>)> {
    let mut priors = Vec::with_capacity(cameras.len());
    let mut dropped = Vec::new();
    for &(id, t) in cameras {
        match camera_prior(traj, extrinsic, id, t) {
            Ok(p) => priors.push(p),
            Err(Error::TimeOutOfRange { .. }) => {
                warn!("camera {id} at t={t} lies outside the trajectory; no prior");
                dropped.push(id);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((priors, dropped))
}

/// Reads a TUM trajectory: `timestamp tx ty tz qx qy qz qw` per line, `#`
/// comments and blank lines ignored.
pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tum(&text, path)
}

pub fn parse_tum(text: &str, path: &Path) -> Result<Trajectory> {
    let mut samples: Vec<SE3Pose> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, line_no, format!("bad number: {e}")))?;
        if fields.len() != 8 {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected 8 fields, found {}", fields.len()),
            ));
        }
        if !fields.iter().all(|v| v.is_finite()) {
            return Err(Error::parse(path, line_no, "non-finite value"));
        }
        let t = fields[0];
        if let Some(prev) = samples.last().and_then(|s| s.timestamp) {
            if t == prev {
                return Err(Error::parse(path, line_no, format!("duplicate timestamp {t}")));
            }
            if t < prev {
                return Err(Error::parse(
                    path,
                    line_no,
                    format!("timestamp {t} decreases (previous {prev})"),
                ));
            }
        }
        let qn = fields[4..8].iter().map(|v| v * v).sum::<f64>().sqrt();
        if qn < 1e-12 {
            return Err(Error::parse(path, line_no, "zero quaternion"));
        }
        let rotation = Rotation::from_wxyz(fields[7], fields[4], fields[5], fields[6]);
        samples.push(
            SE3Pose::new(rotation, Vector3::new(fields[1], fields[2], fields[3])).with_timestamp(t),
        );
    }
    Trajectory::new(samples, "world<-lidar")
}

/// TUM text for poses that all carry timestamps. Floats use the shortest
/// representation that parses back to the same bits.
pub fn format_tum(poses: &[SE3Pose]) -> Result<String> {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (i, p) in poses.iter().enumerate() {
        let t = p
            .timestamp
            .ok_or_else(|| Error::InvalidArgument(format!("pose {i} has no timestamp")))?;
        let [w, x, y, z] = p.rotation.wxyz();
        let v = p.translation;
        writeln!(out, "{t} {} {} {} {x} {y} {z} {w}", v.x, v.y, v.z).unwrap();
    }
    Ok(out)
}

pub fn save_tum(path: &Path, poses: &[SE3Pose]) -> Result<()> {
    fs::write(path, format_tum(poses)?).map_err(|e| Error::io(path, e))
}
