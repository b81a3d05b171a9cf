//! Perspective ray casting with front-to-back emission-absorption
//! compositing, transfer functions, cameras and PNG output.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composite::FusedViews;
use crate::ensemble::Volume;
use crate::error::{Error, Result};
use crate::view::trilinear;

/// Accumulated opacity beyond which a ray stops.
pub const EARLY_TERMINATION: f32 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    pub x: f32,
    pub rgba: [f32; 4],
}

/// Piecewise-linear map from a scalar in `[0, 1]` to RGBA.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    pub points: Vec<ControlPoint>,
}

impl TransferFunction {
    pub fn new(points: Vec<ControlPoint>) -> Result<Self> {
        let tf = Self { points };
        tf.validate()?;
        Ok(tf)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.points;
        if p.len() < 2 || p[0].x != 0.0 || p[p.len() - 1].x != 1.0 {
            return Err(Error::Invalid("transfer function needs at least two points spanning 0 to 1".into()));
        }
        if p.windows(2).any(|w| !(w[1].x > w[0].x)) {
            return Err(Error::Invalid("transfer function positions must be strictly increasing".into()));
        }
        if p.iter().any(|c| c.rgba.iter().any(|v| !(0.0..=1.0).contains(v))) {
            return Err(Error::Invalid("transfer function colours must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn eval(&self, s: f32) -> [f32; 4] {
        let s = s.clamp(0.0, 1.0);
        let k = self.points.partition_point(|c| c.x <= s).clamp(1, self.points.len() - 1);
        let (a, b) = (&self.points[k - 1], &self.points[k]);
        let t = (s - a.x) / (b.x - a.x);
        std::array::from_fn(|i| a.rgba[i] + (b.rgba[i] - a.rgba[i]) * t)
    }

    /// Low-density haze rising to an opaque bright peak.
    pub fn high_opacity() -> Self {
        let p = |x: f32, rgba: [f32; 4]| ControlPoint { x, rgba };
        Self {
            points: vec![
                p(0.0, [0.0, 0.0, 0.0, 0.0]),
                p(0.2, [0.1, 0.1, 0.6, 0.0]),
                p(0.45, [0.2, 0.6, 0.9, 0.15]),
                p(0.7, [0.95, 0.8, 0.2, 0.5]),
                p(1.0, [1.0, 0.3, 0.1, 0.9]),
            ],
        }
    }

    /// Three narrow opaque bands, one per iso-value.
    pub fn three_isosurfaces() -> Self {
        let p = |x: f32, rgba: [f32; 4]| ControlPoint { x, rgba };
        let clear = |x: f32| p(x, [0.0, 0.0, 0.0, 0.0]);
        Self {
            points: vec![
                clear(0.0),
                clear(0.27),
                p(0.3, [0.2, 0.4, 1.0, 0.6]),
                clear(0.33),
                clear(0.52),
                p(0.55, [0.2, 0.9, 0.3, 0.7]),
                clear(0.58),
                clear(0.77),
                p(0.8, [1.0, 0.3, 0.2, 0.9]),
                clear(0.83),
                clear(1.0),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub eye: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn length(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn scaled(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

impl Camera {
    /// Looks at the domain centre from direction `v` at `distance`.
    pub fn orbit(v: [f64; 3], distance: f64, fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        let v = crate::composite::unit(v)?;
        let c = [0.5; 3];
        let up = if v[2].abs() > 0.99 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
        let cam = Self { eye: [c[0] + v[0] * distance, c[1] + v[1] * distance, c[2] + v[2] * distance], look_at: c, up, fov_deg, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let f = sub(self.look_at, self.eye);
        if !(length(f) > 1e-9) {
            return Err(Error::Invalid("camera eye coincides with look-at point".into()));
        }
        if !(length(cross(f, self.up)) > 1e-9 * length(f) * length(self.up)) {
            return Err(Error::Invalid("camera up vector is parallel to the view direction".into()));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Invalid(format!("field of view {} outside (0, 180)", self.fov_deg)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("image extents must be positive".into()));
        }
        Ok(())
    }

    /// Unit direction of the ray through the centre of pixel `(i, j)`, with
    /// `j = 0` the top row.
    pub fn ray(&self, i: usize, j: usize) -> [f64; 3] {
        let f = scaled(sub(self.look_at, self.eye), 1.0 / length(sub(self.look_at, self.eye)));
        let r = cross(f, self.up);
        let r = scaled(r, 1.0 / length(r));
        let u = cross(r, f);
        let half = (self.fov_deg.to_radians() * 0.5).tan();
        let aspect = self.width as f64 / self.height as f64;
        let x = ((i as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * half * aspect;
        let y = (1.0 - (j as f64 + 0.5) / self.height as f64 * 2.0) * half;
        let d = [f[0] + x * r[0] + y * u[0], f[1] + x * r[1] + y * u[1], f[2] + x * r[2] + y * u[2]];
        scaled(d, 1.0 / length(d))
    }
}

/// Entry and exit distances of a ray through the unit cube.
pub fn unit_box_hit(origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if dir[k].abs() < 1e-15 {
            if origin[k] < 0.0 || origin[k] > 1.0 {
                return None;
            }
            continue;
        }
        let a = (0.0 - origin[k]) / dir[k];
        let b = (1.0 - origin[k]) / dir[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t1 >= t0).then_some((t0, t1))
}

/// Scalar field over the unit cube, reporting values mapped to `[0, 1]`
/// through the dataset range.
pub trait ScalarSource: Sync {
    fn unit_value(&self, p: [f64; 3]) -> f32;
    /// Grid resolution used to derive the default step.
    fn resolution(&self) -> usize;
}

impl ScalarSource for Volume {
    fn unit_value(&self, p: [f64; 3]) -> f32 {
        let v = trilinear(&self.values, self.extents, p);
        if self.normalized {
            (v + 1.0) * 0.5
        } else {
            (v - self.range.min) / self.range.range()
        }
    }

    fn resolution(&self) -> usize {
        *self.extents.iter().max().unwrap()
    }
}

impl ScalarSource for FusedViews {
    fn unit_value(&self, p: [f64; 3]) -> f32 {
        (self.sample(p).unwrap_or(-1.0) + 1.0) * 0.5
    }

    fn resolution(&self) -> usize {
        self.views.iter().map(|v| v.config.ray_len.max(v.config.width).max(v.config.height)).max().unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSettings {
    /// World-space step; `None` means half a voxel of the source.
    pub step: Option<f64>,
    pub background: [f32; 3],
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { step: None, background: [0.0; 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB bytes, top row first.
    pub pixels: Vec<u8>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::Shape(format!("image {width}×{height} given {} bytes", pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn pixel(&self, i: usize, j: usize) -> [u8; 3] {
        let k = (j * self.width + i) * 3;
        [self.pixels[k], self.pixels[k + 1], self.pixels[k + 2]]
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Format(format!("png: {e}")))?;
            w.write_image_data(&self.pixels).map_err(|e| Error::Format(format!("png: {e}")))?;
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_png()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct Rendering {
    pub image: ImageRgb,
    /// Accumulated opacity per pixel, row-major.
    pub alpha: Vec<f32>,
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn render(source: &dyn ScalarSource, camera: &Camera, tf: &TransferFunction, settings: &RenderSettings) -> Result<Rendering> {
    camera.validate()?;
    tf.validate()?;
    let step = settings.step.unwrap_or(0.5 / source.resolution() as f64);
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("render step {step} must be positive")));
    }
    let (w, h) = (camera.width, camera.height);
    let mut rgb = vec![0u8; w * h * 3];
    let mut alpha = vec![0f32; w * h];
    rgb.par_chunks_mut(w * 3).zip(alpha.par_chunks_mut(w)).enumerate().for_each(|(j, (row, arow))| {
        for i in 0..w {
            let d = camera.ray(i, j);
            let mut c = [0.0f32; 3];
            let mut a = 0.0f32;
            if let Some((t0, t1)) = unit_box_hit(camera.eye, d) {
                let n = ((t1 - t0) / step).floor() as usize + 1;
                for k in 0..n {
                    let t = t0 + k as f64 * step;
                    let p = std::array::from_fn(|q| (camera.eye[q] + t * d[q]).clamp(0.0, 1.0));
                    let s = tf.eval(source.unit_value(p));
                    let wgt = (1.0 - a) * s[3];
                    for q in 0..3 {
                        c[q] += wgt * s[q];
                    }
                    a += wgt;
                    if a > EARLY_TERMINATION {
                        break;
                    }
                }
            }
            for q in 0..3 {
                row[i * 3 + q] = to_byte(c[q] + (1.0 - a) * settings.background[q]);
            }
            arow[i] = a;
        }
    });
    Ok(Rendering { image: ImageRgb::new(w, h, rgb)?, alpha })
}

/// Deterministic Fibonacci lattice of `n` unit vectors; `n = 1` gives the pole.
pub fn sphere_viewpoints(n: usize) -> Vec<[f64; 3]> {
    if n == 1 {
        return vec![[0.0, 0.0, 1.0]];
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - (2.0 * k as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * k as f64;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}
