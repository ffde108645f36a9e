//! Training losses with analytic gradients.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::splat::{render_backward, GaussianPrimitive, PrimitiveGrad, RenderBuffers, Upstream, ViewCamera};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalWeighting {
    /// `g^5`: edges dominate.
    #[default]
    GradPow5,
    /// `1 - g`: flat regions dominate.
    OneMinusGrad,
}

impl NormalWeighting {
    fn weight(self, g: f64) -> f64 {
        match self {
            NormalWeighting::GradPow5 => g.powi(5),
            NormalWeighting::OneMinusGrad => 1.0 - g,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    pub lambda_en: f64,
    pub lambda_smooth: f64,
    pub eps_erank: f64,
    /// Multiplier on the min-scale term (1 by default, 0 disables it).
    pub lambda_scale: f64,
    /// Multiplier on the normal term (1 by default, 0 disables it).
    pub lambda_normal: f64,
    pub normal_weighting: NormalWeighting,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ssim: 0.2,
            lambda_en: 0.01,
            lambda_smooth: 0.5,
            eps_erank: 1e-6,
            lambda_scale: 1.0,
            lambda_normal: 1.0,
            normal_weighting: NormalWeighting::GradPow5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_en", self.lambda_en),
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_scale", self.lambda_scale),
            ("lambda_normal", self.lambda_normal),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.eps_erank > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eps_erank must be > 0, got {}",
                self.eps_erank
            )));
        }
        if self.lambda_ssim > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda_ssim must be <= 1, got {}",
                self.lambda_ssim
            )));
        }
        Ok(())
    }
}

/// Loss terms. `erank`, `scale` and `normal` include their weights;
/// `smooth` is unweighted, so
/// `total = img + erank + scale + normal + lambda_smooth * smooth`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub img: f64,
    pub scale: f64,
    pub erank: f64,
    pub normal: f64,
    pub smooth: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("img", self.img),
            ("scale", self.scale),
            ("erank", self.erank),
            ("normal", self.normal),
            ("smooth", self.smooth),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Ground truth for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionBundle {
    pub rgb: Image,
    /// Unit-norm camera-frame normals.
    pub normals: Image,
    /// Image-gradient magnitude normalised to [0, 1].
    pub grad: Image,
}

impl SupervisionBundle {
    pub fn new(rgb: Image, normals: Image) -> Result<Self> {
        if rgb.channels != 3 || normals.channels != 3 {
            return Err(Error::DimensionMismatch(
                "rgb and normal supervision need 3 channels".into(),
            ));
        }
        rgb.check_same_shape(&normals, "rgb vs normals")?;
        let grad = image_gradient_magnitude(&rgb);
        Ok(Self { rgb, normals, grad })
    }
}

/// Sobel magnitude of the luma image (clamped borders), divided by its
/// maximum.
pub fn image_gradient_magnitude(rgb: &Image) -> Image {
    let (w, h) = (rgb.width, rgb.height);
    let luma: Vec<f64> = rgb
        .data
        .chunks(rgb.channels)
        .map(|p| {
            if p.len() >= 3 {
                0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
            } else {
                p[0]
            }
        })
        .collect();
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, w as isize - 1) as usize;
        let y = y.clamp(0, h as isize - 1) as usize;
        luma[y * w + x]
    };
    let mut out = Image::new(w, h, 1);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            out.data[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = out.data.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut out.data {
            *v /= max;
        }
    }
    out
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter of a single-channel plane, zero padding.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Mean SSIM over pixels and channels, and optionally its gradient with
/// respect to `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> (f64, Option<Image>) {
    let (w, h, ch) = (a.width, a.height, a.channels);
    let n = (w * h * ch) as f64;
    let k = gaussian_kernel();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, ch));
    for c in 0..ch {
        let x = a.channel(c).data;
        let y = b.channel(c).data;
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = blur(&x, w, h, &k);
        let my = blur(&y, w, h, &k);
        let fxx = blur(&xx, w, h, &k);
        let fyy = blur(&yy, w, h, &k);
        let fxy = blur(&xy, w, h, &k);
        let mut d_mx = vec![0.0; w * h];
        let mut d_a = vec![0.0; w * h];
        let mut d_b = vec![0.0; w * h];
        for p in 0..w * h {
            let sxx = fxx[p] - mx[p] * mx[p];
            let syy = fyy[p] - my[p] * my[p];
            let sxy = fxy[p] - mx[p] * my[p];
            let n1 = 2.0 * mx[p] * my[p] + SSIM_C1;
            let n2 = 2.0 * sxy + SSIM_C2;
            let d1 = mx[p] * mx[p] + my[p] * my[p] + SSIM_C1;
            let d2 = sxx + syy + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                d_a[p] = -s / d2;
                d_b[p] = 2.0 * n1 / (d1 * d2);
                d_mx[p] = 2.0 * my[p] * n2 / (d1 * d2) - 2.0 * mx[p] * s / d1
                    - d_b[p] * my[p]
                    + 2.0 * mx[p] * s / d2;
            }
        }
        if let Some(g) = grad.as_mut() {
            let f_mx = blur(&d_mx, w, h, &k);
            let f_a = blur(&d_a, w, h, &k);
            let f_b = blur(&d_b, w, h, &k);
            for p in 0..w * h {
                g.data[p * ch + c] = (f_mx[p] + 2.0 * x[p] * f_a[p] + y[p] * f_b[p]) / n;
            }
        }
    }
    (total / n, grad)
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b, "ssim")?;
    Ok(ssim_impl(a, b, false).0)
}

/// `(1 - lambda) * L1 + lambda * (1 - SSIM)` and its gradient with respect to
/// `rendered`.
pub fn photometric_loss(rendered: &Image, target: &Image, lambda_ssim: f64) -> Result<(f64, Image)> {
    rendered.check_same_shape(target, "photometric loss")?;
    let n = rendered.data.len() as f64;
    let mut grad = Image::new(rendered.width, rendered.height, rendered.channels);
    let mut l1 = 0.0;
    for ((g, r), t) in grad.data.iter_mut().zip(&rendered.data).zip(&target.data) {
        let d = r - t;
        l1 += d.abs();
        *g = (1.0 - lambda_ssim) * sign(d) / n;
    }
    l1 /= n;
    let mut loss = (1.0 - lambda_ssim) * l1;
    if lambda_ssim > 0.0 {
        let (s, gs) = ssim_impl(rendered, target, true);
        loss += lambda_ssim * (1.0 - s);
        for (g, v) in grad.data.iter_mut().zip(&gs.unwrap().data) {
            *g -= lambda_ssim * v;
        }
    }
    Ok((loss, grad))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum of the smallest scale of each primitive, with the gradient with
/// respect to log-scales.
pub fn scale_loss(scene: &[GaussianPrimitive]) -> (f64, Vec<Vector3<f64>>) {
    let mut total = 0.0;
    let grads = scene
        .iter()
        .map(|g| {
            let k = g.minor_axis();
            let s = g.log_scales[k].exp();
            total += s;
            let mut d = Vector3::zeros();
            d[k] = s;
            d
        })
        .collect();
    (total, grads)
}

/// Effective rank and its gradient with respect to log-scales.
pub fn effective_rank_log(log_scales: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let l2 = log_scales * 2.0;
    let m = l2.max();
    let lse = m + l2.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let log_w = l2.map(|v| v - lse);
    let w = log_w.map(f64::exp);
    let mut h = 0.0;
    for i in 0..3 {
        if w[i] > 0.0 {
            h -= w[i] * log_w[i];
        }
    }
    let en = h.exp();
    let mut grad = Vector3::zeros();
    for j in 0..3 {
        if w[j] > 0.0 {
            grad[j] = -2.0 * en * w[j] * (log_w[j] + h);
        }
    }
    (en, grad)
}

/// `exp` of the entropy of the normalised squared scales; in `[1, 3]`.
pub fn effective_rank(scales: &Vector3<f64>) -> Result<f64> {
    if !scales.iter().all(|s| *s > 0.0 && s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "scales must be positive, got {scales:?}"
        )));
    }
    Ok(effective_rank_log(&scales.map(f64::ln)).0)
}

/// `lambda_en * sum_k max(-log(En_k - 1 + eps), 0)` with gradients with
/// respect to log-scales.
pub fn erank_loss(
    scene: &[GaussianPrimitive],
    lambda_en: f64,
    eps: f64,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(scene.len());
    for (k, g) in scene.iter().enumerate() {
        let (en, d_en) = effective_rank_log(&g.log_scales);
        let arg = en - 1.0 + eps;
        if !(arg > 0.0) {
            return Err(Error::Numeric(format!(
                "primitive {k}: En - 1 + eps = {arg} is not positive"
            )));
        }
        let v = -arg.ln();
        if v > 0.0 {
            total += v;
            grads.push(d_en * (-lambda_en / arg));
        } else {
            grads.push(Vector3::zeros());
        }
    }
    Ok((lambda_en * total, grads))
}

/// Edge-weighted L1 between rendered and supervised normals, averaged over
/// pixels.
pub fn normal_loss(
    rendered: &Image,
    bundle: &SupervisionBundle,
    weighting: NormalWeighting,
) -> Result<(f64, Image)> {
    rendered.check_same_shape(&bundle.normals, "normal loss")?;
    let n = rendered.pixels() as f64;
    let mut grad = Image::new(rendered.width, rendered.height, 3);
    let mut total = 0.0;
    for p in 0..rendered.pixels() {
        let wgt = weighting.weight(bundle.grad.data[p]);
        for c in 0..3 {
            let i = 3 * p + c;
            let d = rendered.data[i] - bundle.normals.data[i];
            total += wgt * d.abs();
            grad.data[i] = wgt * sign(d) / n;
        }
    }
    Ok((total / n, grad))
}

/// Mean over pixels of the L1 forward differences in both image directions.
pub fn smoothness_loss(normals: &Image) -> Result<(f64, Image)> {
    let (w, h, ch) = (normals.width, normals.height, normals.channels);
    if w < 2 || h < 2 {
        return Err(Error::InvalidArgument(format!(
            "smoothness loss needs at least 2x2 pixels, got {w}x{h}"
        )));
    }
    let n = (w * h) as f64;
    let mut grad = Image::new(w, h, ch);
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let here = normals.idx(x, y, c);
                let v = normals.data[here];
                for next in [
                    (y + 1 < h).then(|| normals.idx(x, y + 1, c)),
                    (x + 1 < w).then(|| normals.idx(x + 1, y, c)),
                ]
                .into_iter()
                .flatten()
                {
                    let d = normals.data[next] - v;
                    total += d.abs();
                    grad.data[next] += sign(d) / n;
                    grad.data[here] -= sign(d) / n;
                }
            }
        }
    }
    Ok((total / n, grad))
}

/// Full objective for one view and its gradient with respect to every
/// primitive parameter.
pub fn total_loss(
    scene: &[GaussianPrimitive],
    view: &ViewCamera,
    buffers: &RenderBuffers,
    bundle: &SupervisionBundle,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<PrimitiveGrad>)> {
    let (img, g_color) = photometric_loss(&buffers.color, &bundle.rgb, weights.lambda_ssim)?;
    let (normal, mut g_normal) = normal_loss(&buffers.normal, bundle, weights.normal_weighting)?;
    let (smooth, g_smooth) = smoothness_loss(&buffers.normal)?;
    for (g, s) in g_normal.data.iter_mut().zip(&g_smooth.data) {
        *g = weights.lambda_normal * *g + weights.lambda_smooth * s;
    }
    let mut grads = render_backward(
        scene,
        view,
        buffers,
        &Upstream {
            color: Some(&g_color),
            normal: Some(&g_normal),
            alpha: None,
        },
    )?;
    let (scale, g_scale) = scale_loss(scene);
    let (erank, g_erank) = erank_loss(scene, weights.lambda_en, weights.eps_erank)?;
    for ((g, a), b) in grads.iter_mut().zip(&g_scale).zip(&g_erank) {
        g.log_scales += a * weights.lambda_scale + b;
    }
    let mut out = LossBreakdown {
        img,
        scale: weights.lambda_scale * scale,
        erank,
        normal: weights.lambda_normal * normal,
        smooth,
        total: 0.0,
    };
    out.total = out.img + out.erank + out.scale + out.normal + weights.lambda_smooth * out.smooth;
    Ok((out, grads))
}
