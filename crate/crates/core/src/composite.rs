//! Fusion of the three axis views for an arbitrary viewpoint, and gradient
//! based parameter sensitivity.
//!
//! Each view `i` contributes its trilinear sample with weight
//! `q_i = 1 / min(d(v, v_i), d(v, −v_i))`, where `d` is the great-circle
//! distance; the fused value is `Σ q_i ŝ_i / Σ q_i`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Normalization, ParamSpace, Volume};
use crate::error::{Error, Result};
use crate::predictor::PredictorCheckpoint;
use crate::rae::RaeCheckpoint;
use crate::tensor::{Graph, Tensor};
use crate::view::{Axis, ViewDependentVolume};

/// Lower clamp on viewpoint distances before inversion, in radians.
pub const VIEW_DISTANCE_FLOOR: f64 = 1e-6;
const UNIT_TOL: f64 = 1e-6;

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Scales `v` to unit length.
pub fn unit(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = norm(v);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Invalid(format!("viewpoint {v:?} has no direction")));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

fn check_unit(v: [f64; 3]) -> Result<()> {
    if (norm(v) - 1.0).abs() > UNIT_TOL {
        return Err(Error::Invalid(format!("viewpoint {v:?} is not a unit vector")));
    }
    Ok(())
}

/// Great-circle distance between unit vectors, in `[0, π]`.
pub fn great_circle(v: [f64; 3], w: [f64; 3]) -> Result<f64> {
    check_unit(v)?;
    check_unit(w)?;
    let d = v[0] * w[0] + v[1] * w[1] + v[2] * w[2];
    Ok(d.clamp(-1.0, 1.0).acos())
}

/// Inverse distance to the nearer of `vi` and its antipode `−vi`.
pub fn view_weight(v: [f64; 3], vi: [f64; 3]) -> Result<f64> {
    let sym = [-vi[0], -vi[1], -vi[2]];
    let d = great_circle(v, vi)?.min(great_circle(v, sym)?);
    Ok(1.0 / d.max(VIEW_DISTANCE_FLOOR))
}

/// The three predicted views of one parameter setting, ordered x, y, z, with
/// fusion weights for a fixed viewpoint.
#[derive(Clone, Debug)]
pub struct FusedViews {
    pub views: [ViewDependentVolume; 3],
    pub weights: [f64; 3],
    pub viewpoint: [f64; 3],
}

impl FusedViews {
    pub fn new(views: [ViewDependentVolume; 3], viewpoint: [f64; 3]) -> Result<Self> {
        for (k, v) in views.iter().enumerate() {
            if v.config.axis.index() != k {
                return Err(Error::Invalid(format!("view {k} is along {:?}", v.config.axis)));
            }
            if v.normalization != views[0].normalization {
                return Err(Error::Mismatch("views carry different normalizations".into()));
            }
        }
        let mut weights = [0.0; 3];
        for (k, w) in weights.iter_mut().enumerate() {
            let axis = Axis::from_index(k).unwrap();
            let mut d = axis.direction();
            if !views[k].config.positive {
                d[k] = -1.0;
            }
            *w = view_weight(viewpoint, d)?;
        }
        Ok(Self { views, weights, viewpoint })
    }

    pub fn normalization(&self) -> Normalization {
        self.views[0].normalization
    }

    /// Fused normalized value at a unit-cube position; `None` outside the cube.
    pub fn sample(&self, p: [f64; 3]) -> Option<f32> {
        if p.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return None;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (v, q) in self.views.iter().zip(&self.weights) {
            num += q * v.sample_world(p) as f64;
            den += q;
        }
        Some((num / den) as f32)
    }

    /// Dense fused volume sampled at the cell centres of `extents`.
    pub fn to_grid(&self, extents: [usize; 3]) -> Result<Volume> {
        let [e0, e1, e2] = extents;
        let mut values = vec![0.0f32; e0 * e1 * e2];
        values.par_chunks_mut(e1 * e2).enumerate().for_each(|(x, plane)| {
            let px = (x as f64 + 0.5) / e0 as f64;
            for y in 0..e1 {
                let py = (y as f64 + 0.5) / e1 as f64;
                for z in 0..e2 {
                    let pz = (z as f64 + 0.5) / e2 as f64;
                    plane[y * e2 + z] = self.sample([px, py, pz]).unwrap_or(0.0);
                }
            }
        });
        let mut v = Volume::new(extents, values, self.normalization())?;
        v.normalized = true;
        v.params = self.views[0].params.clone();
        Ok(v)
    }
}

/// Sensitivity of one parameter over uniformly spaced values of its range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub index: usize,
    pub name: String,
    pub values: Vec<f64>,
    /// Mean over the three views of `|d L1 / d p|`.
    pub sensitivities: Vec<f64>,
    pub per_view: Vec<[f64; 3]>,
}

impl SensitivityCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("parameter_value,sensitivity\n");
        for (v, d) in self.values.iter().zip(&self.sensitivities) {
            let _ = writeln!(s, "{v},{d}");
        }
        s
    }

    pub fn mean(&self) -> f64 {
        self.sensitivities.iter().sum::<f64>() / self.sensitivities.len() as f64
    }
}

/// `n` evenly spaced values covering `[lo, hi]`.
pub fn uniform_samples(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|j| if n == 1 { lo } else { lo + (hi - lo) * j as f64 / (n - 1) as f64 }).collect()
}

/// Trained predictor and autoencoder pairs for the three axis views.
#[derive(Clone, Debug)]
pub struct Surrogate {
    pub axes: [(PredictorCheckpoint, RaeCheckpoint); 3],
}

impl Surrogate {
    pub fn new(axes: [(PredictorCheckpoint, RaeCheckpoint); 3]) -> Result<Self> {
        for (k, (p, r)) in axes.iter().enumerate() {
            p.check_pair(r)?;
            if p.view.axis.index() != k {
                return Err(Error::Invalid(format!("checkpoint pair {k} is for axis {:?}", p.view.axis)));
            }
            if p.normalization != axes[0].0.normalization || p.model.space() != axes[0].0.model.space() {
                return Err(Error::Mismatch("axis checkpoints disagree on normalization or parameter space".into()));
            }
        }
        Ok(Self { axes })
    }

    pub fn space(&self) -> &ParamSpace {
        self.axes[0].0.model.space()
    }

    pub fn normalization(&self) -> Normalization {
        self.axes[0].0.normalization
    }

    pub fn predict_views(&self, params: &[f64]) -> Result<[ViewDependentVolume; 3]> {
        let v: Vec<ViewDependentVolume> =
            self.axes.iter().map(|(p, r)| p.predict_view_data(params, r)).collect::<Result<_>>()?;
        Ok(v.try_into().expect("three views"))
    }

    pub fn fuse(&self, params: &[f64], viewpoint: [f64; 3]) -> Result<FusedViews> {
        FusedViews::new(self.predict_views(params)?, viewpoint)
    }

    /// L1 norm of the decoded view-dependent data of `axis` and its gradient
    /// with respect to the raw parameters.
    pub fn view_l1_gradient(&self, axis: usize, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (pred, rae) = &self.axes[axis];
        let mut g = Graph::new();
        let pb = pred.model.bind(&mut g)?;
        let rb = rae.model.bind(&mut g)?;
        let x = g.leaf(Tensor::new(vec![params.len()], params.iter().map(|&v| v as f32).collect())?);
        let y = pred.model.forward_var(&mut g, &pb, x)?;
        let z = pred.model.to_rays_var(&mut g, y)?;
        let d = rae.model.decode_var(&mut g, &rb, z)?;
        let l1 = g.sum_abs(d);
        let value = g.value(l1).data()[0] as f64;
        let grads = g.backward(l1);
        let grad = grads.get(x).map(|t| t.data().iter().map(|&v| v as f64).collect()).unwrap_or_else(|| vec![0.0; params.len()]);
        Ok((value, grad))
    }

    /// L1 norm of the decoded view-dependent data of `axis`, without gradients.
    pub fn view_l1(&self, axis: usize, params: &[f64]) -> Result<f64> {
        let (pred, rae) = &self.axes[axis];
        let v = pred.predict_view_data(params, rae)?;
        Ok(v.values.iter().map(|x| x.abs() as f64).sum())
    }

    pub fn sensitivity(&self, params: &[f64], index: usize, n: usize) -> Result<SensitivityCurve> {
        let space = self.space();
        if index >= space.dim() {
            return Err(Error::Invalid(format!("parameter index {index} out of range for {} parameters", space.dim())));
        }
        if n < 2 {
            return Err(Error::Invalid("sensitivity needs at least 2 samples".into()));
        }
        if params.len() != space.dim() {
            return Err(Error::Invalid(format!("expected {} parameter values", space.dim())));
        }
        let (lo, hi) = space.ranges[index];
        let values = uniform_samples(lo, hi, n);
        let mut per_view = Vec::with_capacity(n);
        for &x in &values {
            let mut p = params.to_vec();
            p[index] = x;
            let mut d = [0.0; 3];
            for (k, dk) in d.iter_mut().enumerate() {
                *dk = self.view_l1_gradient(k, &p)?.1[index];
            }
            per_view.push(d);
        }
        let sensitivities = per_view.iter().map(|d| d.iter().map(|v| v.abs()).sum::<f64>() / 3.0).collect();
        Ok(SensitivityCurve { index, name: space.names[index].clone(), values, sensitivities, per_view })
    }
}
