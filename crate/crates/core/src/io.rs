//! File formats: COLMAP text models, binary PLY scenes, PFM and PNG images.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb};
use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::lie::{se3_inverse, Rotation, SE3Pose};
use crate::posegraph::{Camera, Landmark, Observation, Problem};
use crate::raster::Image;
use crate::splat::GaussianPrimitive;
use crate::traj::Extrinsic;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// COLMAP

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapCamera {
    pub id: u32,
    /// `PINHOLE` or `SIMPLE_PINHOLE`.
    pub model: String,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapImage {
    pub id: u32,
    /// world -> camera, as stored in `images.txt`.
    pub world_to_camera: SE3Pose,
    pub camera_id: u32,
    pub name: String,
    /// Keypoints and the 3D point they belong to.
    pub points2d: Vec<(Vector2<f64>, Option<u64>)>,
}

impl ColmapImage {
    /// camera -> world.
    pub fn pose(&self) -> SE3Pose {
        se3_inverse(&self.world_to_camera)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapPoint {
    pub id: u64,
    pub xyz: Vector3<f64>,
    pub rgb: [u8; 3],
    pub error: f64,
    /// `(image id, index into that image's points2d)`.
    pub track: Vec<(u32, usize)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColmapModel {
    pub cameras: BTreeMap<u32, ColmapCamera>,
    pub images: Vec<ColmapImage>,
    pub points: Vec<ColmapPoint>,
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.starts_with('#'))
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, path: &Path, line: usize, what: &str) -> Result<T> {
    tok.ok_or_else(|| Error::parse(path, line, format!("missing {what}")))?
        .parse()
        .map_err(|_| Error::parse(path, line, format!("invalid {what}")))
}

pub fn parse_cameras(text: &str, path: &Path) -> Result<BTreeMap<u32, ColmapCamera>> {
    let mut out = BTreeMap::new();
    for (ln, line) in data_lines(text) {
        if line.is_empty() {
            continue;
        }
        let mut t = line.split_whitespace();
        let id: u32 = parse_num(t.next(), path, ln, "camera id")?;
        let model = t.next().ok_or_else(|| Error::parse(path, ln, "missing model"))?;
        let w: u32 = parse_num(t.next(), path, ln, "width")?;
        let h: u32 = parse_num(t.next(), path, ln, "height")?;
        let params: Vec<f64> = t
            .map(|v| v.parse().map_err(|_| Error::parse(path, ln, "invalid camera parameter")))
            .collect::<Result<_>>()?;
        let (fx, fy, cx, cy) = match (model, params.as_slice()) {
            ("PINHOLE", [fx, fy, cx, cy]) => (*fx, *fy, *cx, *cy),
            ("SIMPLE_PINHOLE", [f, cx, cy]) => (*f, *f, *cx, *cy),
            ("PINHOLE" | "SIMPLE_PINHOLE", _) => {
                return Err(Error::parse(path, ln, format!("wrong parameter count for {model}")))
            }
            _ => {
                return Err(Error::parse(
                    path,
                    ln,
                    format!("unsupported camera model `{model}` (PINHOLE or SIMPLE_PINHOLE)"),
                ))
            }
        };
        let camera = Camera::new(fx, fy, cx, cy, w, h)
            .map_err(|e| Error::parse(path, ln, e.to_string()))?;
        if out
            .insert(
                id,
                ColmapCamera {
                    id,
                    model: model.to_string(),
                    camera,
                },
            )
            .is_some()
        {
            return Err(Error::parse(path, ln, format!("duplicate camera id {id}")));
        }
    }
    Ok(out)
}

pub fn parse_images(text: &str, path: &Path) -> Result<Vec<ColmapImage>> {
    let mut out: Vec<ColmapImage> = Vec::new();
    let mut lines = data_lines(text).peekable();
    while let Some((ln, line)) = lines.next() {
        if line.is_empty() {
            continue;
        }
        let mut t = line.split_whitespace();
        let id: u32 = parse_num(t.next(), path, ln, "image id")?;
        let mut q = [0.0; 4];
        for (k, v) in q.iter_mut().enumerate() {
            *v = parse_num(t.next(), path, ln, ["qw", "qx", "qy", "qz"][k])?;
        }
        let mut tv = [0.0; 3];
        for (k, v) in tv.iter_mut().enumerate() {
            *v = parse_num(t.next(), path, ln, ["tx", "ty", "tz"][k])?;
        }
        let camera_id: u32 = parse_num(t.next(), path, ln, "camera id")?;
        let name = t.collect::<Vec<_>>().join(" ");
        if name.is_empty() {
            return Err(Error::parse(path, ln, "missing image name"));
        }
        if q.iter().map(|v| v * v).sum::<f64>() == 0.0 {
            return Err(Error::parse(path, ln, "zero quaternion"));
        }
        let mut points2d = Vec::new();
        if let Some((ln2, l2)) = lines.next() {
            let toks: Vec<&str> = l2.split_whitespace().collect();
            if !toks.len().is_multiple_of(3) {
                return Err(Error::parse(path, ln2, "keypoint line is not X Y POINT3D_ID triples"));
            }
            for c in toks.chunks(3) {
                let x: f64 = parse_num(Some(c[0]), path, ln2, "keypoint x")?;
                let y: f64 = parse_num(Some(c[1]), path, ln2, "keypoint y")?;
                let pid: i64 = parse_num(Some(c[2]), path, ln2, "point3D id")?;
                points2d.push((Vector2::new(x, y), (pid >= 0).then_some(pid as u64)));
            }
        }
        if out.iter().any(|i| i.id == id) {
            return Err(Error::parse(path, ln, format!("duplicate image id {id}")));
        }
        out.push(ColmapImage {
            id,
            world_to_camera: SE3Pose::new(
                Rotation::from_wxyz(q[0], q[1], q[2], q[3]),
                Vector3::from(tv),
            ),
            camera_id,
            name,
            points2d,
        });
    }
    Ok(out)
}

pub fn parse_points(text: &str, path: &Path) -> Result<Vec<ColmapPoint>> {
    let mut out = Vec::new();
    for (ln, line) in data_lines(text) {
        if line.is_empty() {
            continue;
        }
        let mut t = line.split_whitespace();
        let id: u64 = parse_num(t.next(), path, ln, "point id")?;
        let mut xyz = [0.0; 3];
        for v in xyz.iter_mut() {
            *v = parse_num(t.next(), path, ln, "coordinate")?;
        }
        let mut rgb = [0u8; 3];
        for v in rgb.iter_mut() {
            *v = parse_num(t.next(), path, ln, "color")?;
        }
        let error: f64 = parse_num(t.next(), path, ln, "error")?;
        let rest: Vec<&str> = t.collect();
        if !rest.len().is_multiple_of(2) {
            return Err(Error::parse(path, ln, "track is not IMAGE_ID POINT2D_IDX pairs"));
        }
        let track = rest
            .chunks(2)
            .map(|c| {
                Ok((
                    parse_num(Some(c[0]), path, ln, "track image id")?,
                    parse_num(Some(c[1]), path, ln, "track point index")?,
                ))
            })
            .collect::<Result<_>>()?;
        out.push(ColmapPoint {
            id,
            xyz: Vector3::from(xyz),
            rgb,
            error,
            track,
        });
    }
    Ok(out)
}

impl ColmapModel {
    pub fn read(dir: &Path) -> Result<Self> {
        let cp = dir.join("cameras.txt");
        let ip = dir.join("images.txt");
        let pp = dir.join("points3D.txt");
        let model = Self {
            cameras: parse_cameras(&read_text(&cp)?, &cp)?,
            images: parse_images(&read_text(&ip)?, &ip)?,
            points: parse_points(&read_text(&pp)?, &pp)?,
        };
        model.validate(dir)?;
        Ok(model)
    }

    fn validate(&self, dir: &Path) -> Result<()> {
        let index: HashMap<u32, &ColmapImage> = self.images.iter().map(|i| (i.id, i)).collect();
        for img in &self.images {
            if !self.cameras.contains_key(&img.camera_id) {
                return Err(Error::InvalidArgument(format!(
                    "{}: image {} references unknown camera {}",
                    dir.display(),
                    img.id,
                    img.camera_id
                )));
            }
        }
        for p in &self.points {
            for (iid, k) in &p.track {
                let ok = index.get(iid).is_some_and(|i| *k < i.points2d.len());
                if !ok {
                    return Err(Error::InvalidArgument(format!(
                        "{}: point {} track entry ({iid}, {k}) is dangling",
                        dir.display(),
                        p.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut s = String::from("# CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n");
        for c in self.cameras.values() {
            let k = &c.camera;
            if c.model == "SIMPLE_PINHOLE" {
                writeln!(s, "{} SIMPLE_PINHOLE {} {} {} {} {}", c.id, k.width, k.height, k.fx, k.cx, k.cy).unwrap();
            } else {
                writeln!(s, "{} PINHOLE {} {} {} {} {} {}", c.id, k.width, k.height, k.fx, k.fy, k.cx, k.cy).unwrap();
            }
        }
        write_bytes(&dir.join("cameras.txt"), s.as_bytes())?;

        let mut s = String::from(
            "# IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n# POINTS2D[] as (X, Y, POINT3D_ID)\n",
        );
        for img in &self.images {
            let [w, x, y, z] = img.world_to_camera.rotation.wxyz();
            let t = img.world_to_camera.translation;
            writeln!(s, "{} {w} {x} {y} {z} {} {} {} {} {}", img.id, t.x, t.y, t.z, img.camera_id, img.name).unwrap();
            let kp: Vec<String> = img
                .points2d
                .iter()
                .map(|(uv, p)| format!("{} {} {}", uv.x, uv.y, p.map_or(-1, |v| v as i64)))
                .collect();
            writeln!(s, "{}", kp.join(" ")).unwrap();
        }
        write_bytes(&dir.join("images.txt"), s.as_bytes())?;

        let mut s = String::from("# POINT3D_ID X Y Z R G B ERROR TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
        for p in &self.points {
            write!(s, "{} {} {} {} {} {} {} {}", p.id, p.xyz.x, p.xyz.y, p.xyz.z, p.rgb[0], p.rgb[1], p.rgb[2], p.error).unwrap();
            for (i, k) in &p.track {
                write!(s, " {i} {k}").unwrap();
            }
            s.push('\n');
        }
        write_bytes(&dir.join("points3D.txt"), s.as_bytes())
    }

    /// Builds a refinement problem: one pose per image (in file order), one
    /// landmark per 3D point (in file order). Priors and relatives are left
    /// empty.
    pub fn to_problem(&self) -> Problem {
        let cam_ids: Vec<u32> = self.cameras.keys().copied().collect();
        let cameras = self.cameras.values().map(|c| c.camera).collect();
        let pose_camera = self
            .images
            .iter()
            .map(|i| cam_ids.binary_search(&i.camera_id).expect("validated"))
            .collect();
        let poses = self.images.iter().map(|i| i.pose()).collect();
        let index: HashMap<u32, usize> = self.images.iter().enumerate().map(|(k, i)| (i.id, k)).collect();
        let mut problem = Problem::new(cameras, poses, pose_camera);
        problem.landmarks = self
            .points
            .iter()
            .map(|p| {
                let obs = p
                    .track
                    .iter()
                    .map(|(iid, k)| {
                        let pose = index[iid];
                        Observation {
                            pose,
                            uv: self.images[pose].points2d[*k].0,
                        }
                    })
                    .collect();
                Landmark::new(p.xyz, obs)
            })
            .collect();
        problem
    }

    /// Replaces image poses (camera -> world, file order) and point positions.
    pub fn update(&mut self, poses: &[SE3Pose], points: &[Vector3<f64>]) -> Result<()> {
        if poses.len() != self.images.len() || points.len() != self.points.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} poses / {} points for a model with {} images / {} points",
                poses.len(),
                points.len(),
                self.images.len(),
                self.points.len()
            )));
        }
        for (img, p) in self.images.iter_mut().zip(poses) {
            img.world_to_camera = se3_inverse(p);
        }
        for (pt, x) in self.points.iter_mut().zip(points) {
            pt.xyz = *x;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// PLY

const PLY_PROPS: [&str; 23] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
    "f_dc_0", "f_dc_1", "f_dc_2", "f_rest_0", "f_rest_1", "f_rest_2", "f_rest_3", "f_rest_4",
    "f_rest_5", "f_rest_6", "f_rest_7", "f_rest_8",
];

/// Per-vertex values in `PLY_PROPS` order. `f_rest` is channel-major:
/// `f_rest[c * 3 + (k - 1)]` holds band `k` of channel `c`.
fn ply_row(g: &GaussianPrimitive) -> [f64; 23] {
    let mut r = [0.0; 23];
    r[0..3].copy_from_slice(g.mean.as_slice());
    r[3..6].copy_from_slice(g.log_scales.as_slice());
    r[6..10].copy_from_slice(&g.rotation.wxyz());
    r[10] = g.opacity_logit;
    r[11..14].copy_from_slice(&g.sh[0..3]);
    for c in 0..3 {
        for k in 1..4 {
            r[14 + c * 3 + (k - 1)] = g.sh[k * 3 + c];
        }
    }
    r
}

fn from_ply_row(r: &[f64; 23]) -> GaussianPrimitive {
    let mut sh = [0.0; 12];
    sh[0..3].copy_from_slice(&r[11..14]);
    for c in 0..3 {
        for k in 1..4 {
            sh[k * 3 + c] = r[14 + c * 3 + (k - 1)];
        }
    }
    GaussianPrimitive {
        mean: Vector3::new(r[0], r[1], r[2]),
        log_scales: Vector3::new(r[3], r[4], r[5]),
        rotation: Rotation::from_wxyz(r[6], r[7], r[8], r[9]),
        opacity_logit: r[10],
        sh,
    }
}

/// Binary little-endian PLY with float32 properties: position, log-scales
/// (`scale_*`), quaternion wxyz (`rot_*`), opacity logit and SH
/// coefficients (`f_dc_*`, `f_rest_*`).
pub fn encode_ply(scene: &[GaussianPrimitive]) -> Vec<u8> {
    let mut out = String::from("ply\nformat binary_little_endian 1.0\n");
    writeln!(out, "element vertex {}", scene.len()).unwrap();
    for p in PLY_PROPS {
        writeln!(out, "property float {p}").unwrap();
    }
    out.push_str("end_header\n");
    let mut bytes = out.into_bytes();
    for g in scene {
        for v in ply_row(g) {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

pub fn write_ply(path: &Path, scene: &[GaussianPrimitive]) -> Result<()> {
    write_bytes(path, &encode_ply(scene))
}

pub fn decode_ply(bytes: &[u8], path: &Path) -> Result<Vec<GaussianPrimitive>> {
    let end = b"end_header\n";
    let hpos = bytes
        .windows(end.len())
        .position(|w| w == end)
        .ok_or_else(|| Error::parse(path, 1, "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..hpos]).map_err(|_| Error::parse(path, 1, "header is not UTF-8"))?;
    let mut count = None;
    let mut props = Vec::new();
    for (i, line) in header.lines().enumerate() {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["ply"] | [] | ["comment", ..] => {}
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", ..] => return Err(Error::parse(path, i + 1, "only binary_little_endian 1.0 is supported")),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| Error::parse(path, i + 1, "invalid vertex count"))?)
            }
            ["element", ..] => return Err(Error::parse(path, i + 1, "unexpected element")),
            ["property", "float", name] => props.push(name.to_string()),
            _ => return Err(Error::parse(path, i + 1, format!("unsupported header line `{line}`"))),
        }
    }
    if props != PLY_PROPS {
        return Err(Error::parse(path, 1, "unexpected vertex property layout"));
    }
    let n = count.ok_or_else(|| Error::parse(path, 1, "missing vertex element"))?;
    let body = &bytes[hpos + end.len()..];
    if body.len() != n * 23 * 4 {
        return Err(Error::parse(path, 1, format!("expected {} data bytes, found {}", n * 92, body.len())));
    }
    Ok(body
        .chunks(92)
        .map(|c| {
            let mut r = [0.0; 23];
            for (k, v) in r.iter_mut().enumerate() {
                *v = f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap()) as f64;
            }
            from_ply_row(&r)
        })
        .collect())
}

pub fn read_ply(path: &Path) -> Result<Vec<GaussianPrimitive>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ply(&bytes, path)
}

// ---------------------------------------------------------------------------
// PFM

/// Little-endian PFM (`PF` for 3 channels, `Pf` for 1), rows stored bottom
/// to top as the format requires.
pub fn encode_pfm(img: &Image) -> Result<Vec<u8>> {
    let tag = match img.channels {
        3 => "PF",
        1 => "Pf",
        c => return Err(Error::InvalidArgument(format!("PFM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for v in &img.data[y * row..(y + 1) * row] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    write_bytes(path, &encode_pfm(img)?)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Image> {
    // three whitespace-terminated header tokens
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if tokens.len() < 4 {
        return Err(Error::parse(path, 1, "truncated PFM header"));
    }
    let channels = match tokens[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(Error::parse(path, 1, "not a PFM file")),
    };
    let w: usize = tokens[1].parse().map_err(|_| Error::parse(path, 2, "invalid width"))?;
    let h: usize = tokens[2].parse().map_err(|_| Error::parse(path, 2, "invalid height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| Error::parse(path, 3, "invalid scale"))?;
    let little = scale < 0.0;
    let n = w * h * channels;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != 4 * n {
        return Err(Error::parse(path, 3, format!("expected {} data bytes, found {}", 4 * n, body.len())));
    }
    let mut img = Image::new(w, h, channels);
    let row = w * channels;
    for (k, c) in body.chunks(4).enumerate() {
        let b: [u8; 4] = c.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (src_row, col) = (k / row, k % row);
        img.data[(h - 1 - src_row) * row + col] = v as f64;
    }
    Ok(img)
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

// ---------------------------------------------------------------------------
// PNG

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit RGB PNG from a 3-channel image in [0, 1] (values are clamped).
pub fn write_png_rgb(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::InvalidArgument("PNG color output needs 3 channels".into()));
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(
        img.width as u32,
        img.height as u32,
        img.data.iter().map(|v| to_u8(*v)).collect(),
    )
    .expect("buffer size matches");
    buf.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

pub fn read_png_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Image::from_vec(
        w as usize,
        h as usize,
        3,
        rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    )
}

/// 16-bit RGB PNG normal map; `[-1, 1]` maps linearly to `[0, 65535]`.
pub fn write_png_normals(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::InvalidArgument("normal maps need 3 channels".into()));
    }
    let data: Vec<u16> = img
        .data
        .iter()
        .map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Rgb<u16>, Vec<u16>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, data).expect("buffer size matches");
    buf.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

pub fn read_png_normals(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })?;
    let rgb = img.to_rgb16();
    let (w, h) = rgb.dimensions();
    Image::from_vec(
        w as usize,
        h as usize,
        3,
        rgb.into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0 * 2.0 - 1.0)
            .collect(),
    )
}

/// Normal map from `.pfm` or 16-bit `.png`, renormalised per pixel.
pub fn read_normal_map(path: &Path) -> Result<Image> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let mut img = match ext.as_str() {
        "pfm" => read_pfm(path)?,
        "png" => read_png_normals(path)?,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "{}: normal maps must be .pfm or .png",
                path.display()
            )))
        }
    };
    if img.channels != 3 {
        return Err(Error::DimensionMismatch(format!("{}: normal map needs 3 channels", path.display())));
    }
    for p in img.data.chunks_mut(3) {
        let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if n > 0.0 {
            for v in p {
                *v /= n;
            }
        }
    }
    Ok(img)
}

// ---------------------------------------------------------------------------
// rig files

/// Parses a single `tx ty tz qx qy qz qw` line (comments allowed).
pub fn parse_extrinsic(text: &str, path: &Path) -> Result<Extrinsic> {
    let mut lines = data_lines(text).filter(|(_, l)| !l.is_empty());
    let (line, l) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty extrinsic file"))?;
    let mut tok = l.split_whitespace();
    let mut v = [0.0; 7];
    for (k, x) in v.iter_mut().enumerate() {
        *x = parse_num(tok.next(), path, line, &format!("field {}", k + 1))?;
    }
    if tok.next().is_some() {
        return Err(Error::parse(path, line, "expected 7 fields"));
    }
    if let Some((line, _)) = lines.next() {
        return Err(Error::parse(path, line, "unexpected extra line"));
    }
    Extrinsic::from_tuple(v)
}

pub fn load_extrinsic(path: &Path) -> Result<Extrinsic> {
    parse_extrinsic(&read_text(path)?, path)
}

/// Parses `name timestamp` lines.
pub fn parse_camera_times(text: &str, path: &Path) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (line, l) in data_lines(text).filter(|(_, l)| !l.is_empty()) {
        let mut tok = l.split_whitespace();
        let name = tok.next().unwrap().to_string();
        let t: f64 = parse_num(tok.next(), path, line, "timestamp")?;
        if !t.is_finite() || tok.next().is_some() {
            return Err(Error::parse(path, line, "expected `name timestamp`"));
        }
        if out.iter().any(|(n, _): &(String, f64)| *n == name) {
            return Err(Error::parse(path, line, format!("duplicate image `{name}`")));
        }
        out.push((name, t));
    }
    Ok(out)
}

pub fn load_camera_times(path: &Path) -> Result<Vec<(String, f64)>> {
    parse_camera_times(&read_text(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn colmap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cameras = BTreeMap::new();
        cameras.insert(
            1,
            ColmapCamera {
                id: 1,
                model: "PINHOLE".into(),
                camera: Camera::new(100.0, 101.5, 32.0, 24.0, 64, 48).unwrap(),
            },
        );
        cameras.insert(
            3,
            ColmapCamera {
                id: 3,
                model: "SIMPLE_PINHOLE".into(),
                camera: Camera::new(80.0, 80.0, 30.0, 20.0, 60, 40).unwrap(),
            },
        );
        let model = ColmapModel {
            cameras,
            images: vec![
                ColmapImage {
                    id: 4,
                    world_to_camera: SE3Pose::new(
                        Rotation::from_wxyz(0.9, 0.1, -0.3, 0.2),
                        Vector3::new(0.1, 0.2, 0.3),
                    ),
                    camera_id: 1,
                    name: "a b.png".into(),
                    points2d: vec![(Vector2::new(1.25, 2.5), Some(7)), (Vector2::new(3.0, 4.0), None)],
                },
                ColmapImage {
                    id: 9,
                    world_to_camera: SE3Pose::identity(),
                    camera_id: 3,
                    name: "c.png".into(),
                    points2d: vec![(Vector2::new(5.5, 6.5), Some(7))],
                },
            ],
            points: vec![ColmapPoint {
                id: 7,
                xyz: Vector3::new(0.5, -1.0 / 3.0, 4.0),
                rgb: [10, 20, 30],
                error: 0.25,
                track: vec![(4, 0), (9, 0)],
            }],
        };
        model.write(dir.path()).unwrap();
        let back = ColmapModel::read(dir.path()).unwrap();
        assert_eq!(back, model);

        let problem = back.to_problem();
        assert_eq!(problem.poses.len(), 2);
        assert_eq!(problem.pose_camera, vec![0, 1]);
        assert_eq!(problem.landmarks[0].observations[1].uv, Vector2::new(5.5, 6.5));
    }

    #[test]
    fn colmap_errors_name_lines() {
        let p = Path::new("cameras.txt");
        let e = parse_cameras("# c\n1 OPENCV 10 10 1 1 5 5 0 0 0 0\n", p).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse_cameras("1 PINHOLE 10 10 1 1 5\n", p).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = parse_images("1 1 0 0 0 0 0 0 1 a.png\n1 2\n", Path::new("images.txt")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn ply_round_trip_at_float_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = crate::splat::random_scene(&mut rng, 7);
        let bytes = encode_ply(&scene);
        let back = decode_ply(&bytes, Path::new("x.ply")).unwrap();
        assert_eq!(back.len(), 7);
        for (a, b) in scene.iter().zip(&back) {
            let (pa, pb) = (a.to_params(), b.to_params());
            for k in 0..23 {
                assert!((pa[k] - pb[k]).abs() < 1e-6 * pa[k].abs().max(1.0));
            }
        }
        // re-encoding the decoded scene is exact
        assert_eq!(encode_ply(&back), bytes);
        assert!(decode_ply(b"ply\nformat ascii 1.0\nend_header\n", Path::new("x")).is_err());
    }

    #[test]
    fn pfm_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for ch in [1, 3] {
            let mut img = Image::new(5, 4, ch);
            for v in img.data.iter_mut() {
                *v = rng.random_range(-1.0..1.0) as f32 as f64;
            }
            let back = decode_pfm(&encode_pfm(&img).unwrap(), Path::new("x.pfm")).unwrap();
            assert_eq!(back, img);
        }
        assert!(encode_pfm(&Image::new(2, 2, 2)).is_err());
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(4, 3, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        let p = dir.path().join("c.png");
        write_png_rgb(&p, &img).unwrap();
        assert_eq!(read_png_rgb(&p).unwrap(), img);

        let mut n = Image::new(3, 2, 3);
        for p in n.data.chunks_mut(3) {
            p.copy_from_slice(&[0.0, -0.6, 0.8]);
        }
        let p = dir.path().join("n.png");
        write_png_normals(&p, &n).unwrap();
        let back = read_normal_map(&p).unwrap();
        for (a, b) in back.data.iter().zip(&n.data) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn rig_files_parse() {
        let p = Path::new("rig.txt");
        let e = parse_extrinsic("# lidar <- camera\n0.1 0.2 0.3 0 0 0 1\n", p).unwrap();
        assert_eq!(e.to_tuple(), [0.1, 0.2, 0.3, 0.0, 0.0, 0.0, 1.0]);
        assert!(parse_extrinsic("0 0 0 0 0 1\n", p).is_err());
        assert!(parse_extrinsic("0 0 0 0 0 0 1\n0 0 0 0 0 0 1\n", p).is_err());

        let t = parse_camera_times("a.png 0.5\n\nb.png 1.5\n", p).unwrap();
        assert_eq!(t, vec![("a.png".to_string(), 0.5), ("b.png".to_string(), 1.5)]);
        assert!(matches!(parse_camera_times("a.png x\n", p), Err(Error::Parse { line: 1, .. })));
        assert!(parse_camera_times("a.png 1\na.png 2\n", p).is_err());
    }
}
