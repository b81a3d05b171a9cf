//! Volume and image quality metrics, plus CIELUV difference images.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::Volume;
use crate::error::{Error, Result};
use crate::render::ImageRgb;

pub const EMD_BINS: usize = 64;
pub const DIFFERENCE_THRESHOLD: f64 = 6.0;

fn check_volumes(a: &Volume, b: &Volume) -> Result<()> {
    if a.extents != b.extents {
        return Err(Error::Shape(format!("volume extents {:?} and {:?} differ", a.extents, b.extents)));
    }
    Ok(())
}

fn check_images(a: &ImageRgb, b: &ImageRgb) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape(format!("image extents {}×{} and {}×{} differ", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

/// Peak signal-to-noise ratio over value range `range`; `+∞` for identical inputs.
pub fn psnr(a: &Volume, b: &Volume, range: f64) -> Result<f64> {
    check_volumes(a, b)?;
    let sse: f64 = a.values.par_iter().zip(&b.values).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// Maximum absolute voxel difference divided by `range`.
pub fn md(a: &Volume, b: &Volume, range: f64) -> Result<f64> {
    check_volumes(a, b)?;
    let m = a.values.par_iter().zip(&b.values).map(|(x, y)| (*x as f64 - *y as f64).abs()).reduce(|| 0.0, f64::max);
    Ok(m / range)
}

fn luma(img: &ImageRgb) -> Vec<f64> {
    img.pixels.chunks(3).map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()
}

fn gaussian_window() -> [f64; 11] {
    let mut w: [f64; 11] = std::array::from_fn(|i| {
        let x = i as f64 - 5.0;
        (-(x * x) / (2.0 * 1.5 * 1.5)).exp()
    });
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering with the 11-tap Gaussian.
fn filter(x: &[f64], w: usize, h: usize, k: &[f64; 11]) -> Vec<f64> {
    let (ow, oh) = (w - 10, h - 10);
    let mut rows = vec![0.0; ow * h];
    for j in 0..h {
        for i in 0..ow {
            rows[j * ow + i] = (0..11).map(|t| k[t] * x[j * w + i + t]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for j in 0..oh {
        for i in 0..ow {
            out[j * ow + i] = (0..11).map(|t| k[t] * rows[(j + t) * ow + i]).sum();
        }
    }
    out
}

/// Mean SSIM on luma over all 11×11 Gaussian windows fully inside the image.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    check_images(a, b)?;
    if a.width < 11 || a.height < 11 {
        return Err(Error::Shape(format!("ssim needs images of at least 11×11, got {}×{}", a.width, a.height)));
    }
    let (w, h) = (a.width, a.height);
    let k = gaussian_window();
    let (x, y) = (luma(a), luma(b));
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|v| filter(v, w, h, &k));
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

fn channel_cdf(img: &ImageRgb, c: usize, bins: usize) -> Vec<f64> {
    let mut hist = vec![0.0; bins];
    for p in img.pixels.chunks(3) {
        hist[p[c] as usize * bins / 256] += 1.0;
    }
    let n = (img.width * img.height) as f64;
    let mut acc = 0.0;
    hist.iter()
        .map(|v| {
            acc += v / n;
            acc
        })
        .collect()
}

/// Earth mover's distance between per-channel colour histograms, averaged
/// over the three channels.
pub fn emd(a: &ImageRgb, b: &ImageRgb, bins: usize) -> Result<f64> {
    if bins == 0 || bins > 256 {
        return Err(Error::Invalid(format!("emd bins {bins} outside 1..=256")));
    }
    let mut total = 0.0;
    for c in 0..3 {
        let (ca, cb) = (channel_cdf(a, c, bins), channel_cdf(b, c, bins));
        total += ca.iter().zip(&cb).map(|(x, y)| (x - y).abs()).sum::<f64>() / bins as f64;
    }
    Ok(total / 3.0)
}

fn srgb_to_linear(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn uv_prime(x: f64, y: f64, z: f64) -> (f64, f64) {
    let d = x + 15.0 * y + 3.0 * z;
    if d == 0.0 {
        return (0.0, 0.0);
    }
    (4.0 * x / d, 9.0 * y / d)
}

fn linear_to_xyz([r, g, b]: [f64; 3]) -> [f64; 3] {
    [
        0.4124564 * r + 0.3575761 * g + 0.1804375 * b,
        0.2126729 * r + 0.7151522 * g + 0.0721750 * b,
        0.0193339 * r + 0.1191920 * g + 0.9503041 * b,
    ]
}

/// CIELUV coordinates of an sRGB colour under the D65 white point (taken as
/// the image of linear `(1, 1, 1)`, so sRGB white is exactly `(100, 0, 0)`).
pub fn srgb_to_luv(p: [u8; 3]) -> [f64; 3] {
    let [x, y, z] = linear_to_xyz(p.map(srgb_to_linear));
    let white = linear_to_xyz([1.0; 3]);
    let yr = y / white[1];
    let l = if yr > (6.0f64 / 29.0).powi(3) { 116.0 * yr.cbrt() - 16.0 } else { (29.0f64 / 3.0).powi(3) * yr };
    if l == 0.0 {
        return [0.0, 0.0, 0.0];
    }
    let (u, v) = uv_prime(x, y, z);
    let (un, vn) = uv_prime(white[0], white[1], white[2]);
    [l, 13.0 * l * (u - un), 13.0 * l * (v - vn)]
}

pub fn delta_e(a: [u8; 3], b: [u8; 3]) -> f64 {
    let (p, q) = (srgb_to_luv(a), srgb_to_luv(b));
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

fn highlight(de: f64, threshold: f64) -> [u8; 3] {
    // yellow at the threshold through red at four times the threshold
    let t = ((de - threshold) / (3.0 * threshold)).clamp(0.0, 1.0);
    [255, (255.0 * (1.0 - t)).round() as u8, 0]
}

#[derive(Clone, Debug)]
pub struct DifferenceImage {
    pub image: ImageRgb,
    pub flagged_fraction: f64,
}

/// Pixels with `ΔE ≥ threshold` drawn in a yellow-to-red ramp over a
/// grayscale copy of `a`.
pub fn difference_image(a: &ImageRgb, b: &ImageRgb, threshold: f64) -> Result<DifferenceImage> {
    check_images(a, b)?;
    let mut flagged = 0usize;
    let mut out = Vec::with_capacity(a.pixels.len());
    for (p, q) in a.pixels.chunks(3).zip(b.pixels.chunks(3)) {
        let (p, q) = ([p[0], p[1], p[2]], [q[0], q[1], q[2]]);
        let de = delta_e(p, q);
        if de >= threshold {
            flagged += 1;
            out.extend(highlight(de, threshold));
        } else {
            let g = (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round() as u8;
            out.extend([g, g, g]);
        }
    }
    Ok(DifferenceImage { image: ImageRgb::new(a.width, a.height, out)?, flagged_fraction: flagged as f64 / (a.width * a.height) as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `None` when the volumes are identical.
    pub psnr: Option<f64>,
    pub psnr_infinite: bool,
    pub md: f64,
    pub ssim: f64,
    pub emd: f64,
    pub flagged_fraction: f64,
}

impl MetricsReport {
    pub fn compute(truth: &Volume, pred: &Volume, range: f64, truth_img: &ImageRgb, pred_img: &ImageRgb) -> Result<Self> {
        let p = psnr(truth, pred, range)?;
        Ok(Self {
            psnr: p.is_finite().then_some(p),
            psnr_infinite: p.is_infinite(),
            md: md(truth, pred, range)?,
            ssim: ssim(truth_img, pred_img)?,
            emd: emd(truth_img, pred_img, EMD_BINS)?,
            flagged_fraction: difference_image(truth_img, pred_img, DIFFERENCE_THRESHOLD)?.flagged_fraction,
        })
    }
}
