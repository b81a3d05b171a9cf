//! Axis-aligned view-dependent resampling and per-pixel ray extraction.
//!
//! For a view along grid axis `a`, the image plane spans the other two axes
//! in increasing order. Pixel `(i, j)` sits at plane coordinates
//! `((i + 0.5)/W, (j + 0.5)/H)`; grid samples are cell centred. The ray
//! axis keeps its full resolution `L0`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Normalization, Volume};
use crate::error::{Error, Result};
use crate::io::{read_json, read_raw_f32, write_json, write_raw_f32};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn from_index(k: usize) -> Option<Axis> {
        Axis::ALL.get(k).copied()
    }

    /// The two grid axes spanning the image plane, in increasing order.
    pub fn plane_axes(self) -> [usize; 2] {
        match self {
            Axis::X => [1, 2],
            Axis::Y => [0, 2],
            Axis::Z => [0, 1],
        }
    }

    pub fn direction(self) -> [f64; 3] {
        let mut d = [0.0; 3];
        d[self.index()] = 1.0;
        d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ViewConfig {
    pub axis: Axis,
    /// `true` when the view looks from the positive end of the axis. Ray
    /// samples are always ordered by increasing grid index.
    pub positive: bool,
    pub width: usize,
    pub height: usize,
    pub ray_len: usize,
}

impl ViewConfig {
    /// View of a volume with `extents` along `axis` at `width × height`.
    pub fn for_volume(axis: Axis, extents: [usize; 3], width: usize, height: usize) -> Result<Self> {
        let cfg = Self { axis, positive: true, width, height, ray_len: extents[axis.index()] };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.ray_len == 0 {
            return Err(Error::Invalid(format!("view extents must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.width, self.height, self.ray_len]
    }

    pub fn rays(&self) -> usize {
        self.width * self.height
    }
}

/// `W × H × L0` samples, index `(i·H + j)·L0 + k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewDependentVolume {
    pub config: ViewConfig,
    pub values: Vec<f32>,
    pub normalization: Normalization,
    pub params: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ViewHeader {
    view: ViewConfig,
    min: f32,
    max: f32,
    params: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

/// Bilinear weights for a cell-centred continuous coordinate `u ∈ [0,1]` on
/// an axis of `n` samples: `(lower index, upper index, upper weight)`.
pub(crate) fn lerp_coord(u: f64, n: usize) -> (usize, usize, f64) {
    let g = (u * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let lo = g.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    (lo, hi, g - lo as f64)
}

impl ViewDependentVolume {
    pub fn new(config: ViewConfig, values: Vec<f32>, normalization: Normalization) -> Result<Self> {
        config.validate()?;
        if values.len() != config.width * config.height * config.ray_len {
            return Err(Error::Shape(format!("view data {:?} given {} values", config.shape(), values.len())));
        }
        Ok(Self { config, values, normalization, params: None })
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[(i * self.config.height + j) * self.config.ray_len + k]
    }

    pub fn save(&self, base: &Path, config_hash: Option<&str>) -> Result<()> {
        let header = ViewHeader {
            view: self.config,
            min: self.normalization.min,
            max: self.normalization.max,
            params: self.params.clone(),
            config_hash: config_hash.map(String::from),
        };
        write_json(&base.with_extension("json"), &header)?;
        write_raw_f32(&base.with_extension("raw"), &self.values)
    }

    pub fn load(base: &Path) -> Result<Self> {
        let h: ViewHeader = read_json(&base.with_extension("json"))?;
        let values = read_raw_f32(&base.with_extension("raw"))?;
        let mut v = Self::new(h.view, values, Normalization { min: h.min, max: h.max })?;
        v.params = h.params;
        Ok(v)
    }

    /// Trilinear sample at a continuous position in the unit cube, with the
    /// image-plane axes at `W × H` and the ray axis at `L0` resolution.
    pub fn sample_world(&self, p: [f64; 3]) -> f32 {
        let c = &self.config;
        let [a, b] = c.axis.plane_axes();
        trilinear(&self.values, c.shape(), [p[a], p[b], p[c.axis.index()]])
    }
}

/// Trilinear interpolation of cell-centred samples `values` laid out as
/// `(i·e1 + j)·e2 + k`, at unit-cube coordinates `u`. Coordinates outside
/// the cube are clamped to the boundary samples.
pub fn trilinear(values: &[f32], extents: [usize; 3], u: [f64; 3]) -> f32 {
    let (i0, i1, fi) = lerp_coord(u[0], extents[0]);
    let (j0, j1, fj) = lerp_coord(u[1], extents[1]);
    let (k0, k1, fk) = lerp_coord(u[2], extents[2]);
    let at = |i: usize, j: usize, k: usize| values[(i * extents[1] + j) * extents[2] + k] as f64;
    let lerp = |x: f64, y: f64, t: f64| x + (y - x) * t;
    let v0 = lerp(lerp(at(i0, j0, k0), at(i0, j0, k1), fk), lerp(at(i0, j1, k0), at(i0, j1, k1), fk), fj);
    let v1 = lerp(lerp(at(i1, j0, k0), at(i1, j0, k1), fk), lerp(at(i1, j1, k0), at(i1, j1, k1), fk), fj);
    lerp(v0, v1, fi) as f32
}

/// Resamples a normalized volume onto the image plane of `config`.
pub fn sample_view(volume: &Volume, config: &ViewConfig) -> Result<ViewDependentVolume> {
    config.validate()?;
    if !volume.normalized {
        return Err(Error::Invalid("sample_view expects a normalized volume".into()));
    }
    let ray_axis = config.axis.index();
    if volume.extents[ray_axis] != config.ray_len {
        return Err(Error::Mismatch(format!(
            "view ray length {} differs from volume extent {} along {:?}",
            config.ray_len, volume.extents[ray_axis], config.axis
        )));
    }
    let [a, b] = config.axis.plane_axes();
    let e = volume.extents;
    let strides = [e[1] * e[2], e[2], 1];
    let (w, h, l) = (config.width, config.height, config.ray_len);
    let mut values = vec![0.0f32; w * h * l];
    values.par_chunks_mut(h * l).enumerate().for_each(|(i, plane)| {
        let (a0, a1, fa) = lerp_coord((i as f64 + 0.5) / w as f64, e[a]);
        for j in 0..h {
            let (b0, b1, fb) = lerp_coord((j as f64 + 0.5) / h as f64, e[b]);
            let corners = [
                (a0 * strides[a] + b0 * strides[b], (1.0 - fa) * (1.0 - fb)),
                (a0 * strides[a] + b1 * strides[b], (1.0 - fa) * fb),
                (a1 * strides[a] + b0 * strides[b], fa * (1.0 - fb)),
                (a1 * strides[a] + b1 * strides[b], fa * fb),
            ];
            let ray = &mut plane[j * l..(j + 1) * l];
            for (k, out) in ray.iter_mut().enumerate() {
                let off = k * strides[ray_axis];
                let v: f64 = corners.iter().map(|(base, wt)| wt * volume.values[base + off] as f64).sum();
                *out = v as f32;
            }
        }
    });
    let mut vdv = ViewDependentVolume::new(*config, values, volume.range)?;
    vdv.params = volume.params.clone();
    Ok(vdv)
}

/// All `W·H` rays as a `[W·H, 1, L0]` batch; ray index is `i·H + j`.
pub fn extract_rays(vdv: &ViewDependentVolume) -> Tensor {
    let c = &vdv.config;
    Tensor::new(vec![c.rays(), 1, c.ray_len], vdv.values.clone()).expect("view data shape")
}

/// Inverse of [`extract_rays`].
pub fn reassemble(rays: &Tensor, config: ViewConfig, normalization: Normalization) -> Result<ViewDependentVolume> {
    if rays.shape() != [config.rays(), 1, config.ray_len] {
        return Err(Error::Shape(format!("rays {:?} do not match view {:?}", rays.shape(), config.shape())));
    }
    ViewDependentVolume::new(config, rays.data().to_vec(), normalization)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm() -> Normalization {
        Normalization::new(-1.0, 1.0).unwrap()
    }

    fn normalized(extents: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Volume {
        let mut values = Vec::new();
        for x in 0..extents[0] {
            for y in 0..extents[1] {
                for z in 0..extents[2] {
                    values.push(f(x, y, z));
                }
            }
        }
        let mut v = Volume::new(extents, values, norm()).unwrap();
        v.normalized = true;
        v
    }

    #[test]
    fn paper_scale_shape() {
        let cfg = ViewConfig::for_volume(Axis::Z, [512, 512, 512], 384, 384).unwrap();
        assert_eq!(cfg.shape(), [384, 384, 512]);
    }

    #[test]
    fn anisotropic_view_shapes() {
        let e = [1536, 768, 768];
        assert_eq!(ViewConfig::for_volume(Axis::X, e, 384, 384).unwrap().shape(), [384, 384, 1536]);
        assert_eq!(ViewConfig::for_volume(Axis::Y, e, 384, 768).unwrap().shape(), [384, 768, 768]);
        assert_eq!(ViewConfig::for_volume(Axis::Z, e, 768, 384).unwrap().shape(), [768, 384, 768]);
    }

    #[test]
    fn constant_volume_stays_constant() {
        let v = normalized([6, 5, 4], |_, _, _| 0.25);
        let cfg = ViewConfig::for_volume(Axis::Y, v.extents, 3, 7).unwrap();
        let s = sample_view(&v, &cfg).unwrap();
        assert!(s.values.iter().all(|&x| (x - 0.25).abs() < 1e-7));
    }

    #[test]
    fn ramp_along_plane_axis() {
        // f = x-coordinate of the cell centre, viewed along z
        let n = 8;
        let v = normalized([n, n, n], |x, _, _| (x as f32 + 0.5) / n as f32);
        let cfg = ViewConfig::for_volume(Axis::Z, v.extents, 5, 5).unwrap();
        let s = sample_view(&v, &cfg).unwrap();
        for i in 0..5 {
            let u = (i as f64 + 0.5) / 5.0;
            // linear interpolation reproduces the ramp away from the clamped edge cells
            let expect = u.clamp(0.5 / n as f64, 1.0 - 0.5 / n as f64);
            for j in 0..5 {
                for k in 0..n {
                    assert!((s.get(i, j, k) as f64 - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn full_resolution_is_identity() {
        let v = normalized([4, 5, 6], |x, y, z| ((x * 31 + y * 7 + z) as f32 * 0.013).sin());
        for axis in Axis::ALL {
            let [a, b] = axis.plane_axes();
            let cfg = ViewConfig::for_volume(axis, v.extents, v.extents[a], v.extents[b]).unwrap();
            let s = sample_view(&v, &cfg).unwrap();
            for i in 0..cfg.width {
                for j in 0..cfg.height {
                    for k in 0..cfg.ray_len {
                        let mut idx = [0; 3];
                        idx[a] = i;
                        idx[b] = j;
                        idx[axis.index()] = k;
                        assert_eq!(s.get(i, j, k), v.get(idx[0], idx[1], idx[2]));
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_ray_length_mismatch() {
        let v = normalized([4, 4, 4], |_, _, _| 0.0);
        let cfg = ViewConfig { axis: Axis::X, positive: true, width: 4, height: 4, ray_len: 8 };
        assert!(sample_view(&v, &cfg).is_err());
    }

    #[test]
    fn rays_roundtrip() {
        let v = normalized([2, 2, 3], |x, y, z| (x * 6 + y * 3 + z) as f32 / 12.0);
        let cfg = ViewConfig::for_volume(Axis::Z, v.extents, 2, 2).unwrap();
        let s = sample_view(&v, &cfg).unwrap();
        let rays = extract_rays(&s);
        assert_eq!(rays.shape(), &[4, 1, 3]);
        // ray k = i·H + j
        assert_eq!(&rays.data()[3..6], &[s.get(0, 1, 0), s.get(0, 1, 1), s.get(0, 1, 2)]);
        let back = reassemble(&rays, cfg, s.normalization).unwrap();
        assert_eq!(back.values, s.values);
    }

    #[test]
    fn samples_stay_in_unit_interval() {
        let v = normalized([7, 7, 7], |x, y, z| (((x * 13 + y * 5 + z * 3) % 17) as f32 / 8.0) - 1.0);
        let cfg = ViewConfig::for_volume(Axis::X, v.extents, 11, 3).unwrap();
        let s = sample_view(&v, &cfg).unwrap();
        assert!(s.values.iter().all(|x| (-1.0..=1.0).contains(x)));
    }
}
