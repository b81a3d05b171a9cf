//! Parameter-space interpolation baselines: inverse distance weighting over
//! the nearest training members and Gaussian radial basis functions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::{ParamSpace, Volume};
use crate::error::{Error, Result};

pub const IDW_DELTA: f64 = 1e-6;

fn check_members(members: &[(Vec<f64>, &Volume)]) -> Result<()> {
    let Some((_, first)) = members.first() else {
        return Err(Error::Invalid("interpolation baseline needs at least one training member".into()));
    };
    if members.iter().any(|(_, v)| v.extents != first.extents || v.normalized != first.normalized) {
        return Err(Error::Mismatch("training volumes differ in extents or normalization state".into()));
    }
    Ok(())
}

fn blend(members: &[(Vec<f64>, &Volume)], weights: &[(usize, f64)]) -> Result<Volume> {
    let first = members[0].1;
    let mut acc = vec![0.0f64; first.len()];
    for &(k, w) in weights {
        for (a, v) in acc.iter_mut().zip(&members[k].1.values) {
            *a += w * *v as f64;
        }
    }
    let mut out = Volume::new(first.extents, acc.into_iter().map(|v| v as f32).collect(), first.range)?;
    out.normalized = first.normalized;
    Ok(out)
}

fn manhattan(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Weighted mean of the `g` training volumes nearest to `query` in Manhattan
/// distance over range-normalized parameters, with weights `1/(d + δ)`.
pub fn idw(space: &ParamSpace, members: &[(Vec<f64>, &Volume)], query: &[f64], g: usize) -> Result<Volume> {
    check_members(members)?;
    if g == 0 || g > members.len() {
        return Err(Error::Invalid(format!("idw: g={g} with {} training members", members.len())));
    }
    let q = space.to_unit(query);
    let mut d: Vec<(usize, f64)> = members.iter().enumerate().map(|(k, (p, _))| (k, manhattan(&space.to_unit(p), &q))).collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d.truncate(g);
    let raw: Vec<f64> = d.iter().map(|(_, dist)| 1.0 / (dist + IDW_DELTA)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<(usize, f64)> = d.iter().zip(&raw).map(|((k, _), w)| (*k, w / total)).collect();
    blend(members, &weights)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Gaussian RBF interpolant `Σ c_i exp(−(r/ε)²)` fitted voxelwise to the
/// training volumes, with `ε` chosen by gradient descent on the
/// leave-one-out error.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RbfModel {
    pub width: f64,
    pub loo_cost: f64,
    /// Range-normalized training parameters.
    centers: Vec<Vec<f64>>,
}

struct LooEval {
    cost: f64,
    grad: f64,
}

fn kernel_matrix(centers: &[Vec<f64>], width: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = centers.len();
    let mut phi = DMatrix::zeros(n, n);
    let mut r2 = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let r = euclid(&centers[i], &centers[j]);
            r2[(i, j)] = r * r;
            phi[(i, j)] = (-(r * r) / (width * width)).exp();
        }
    }
    (phi, r2)
}

/// Leave-one-out cost `Σ_k (A G A)_kk / A_kk²` with `A = Φ⁻¹` and
/// `G = F Fᵀ` the Gram matrix of the training volumes, plus its derivative
/// with respect to the width.
fn loo(centers: &[Vec<f64>], gram: &DMatrix<f64>, width: f64) -> Option<LooEval> {
    let (phi, r2) = kernel_matrix(centers, width);
    let a = phi.clone().try_inverse()?;
    let dphi = phi.component_mul(&r2) * (2.0 / width.powi(3));
    let da = -(&a * &dphi * &a);
    let aga = &a * gram * &a;
    let daga = &da * gram * &a;
    let mut cost = 0.0;
    let mut grad = 0.0;
    for k in 0..centers.len() {
        let (n, d) = (aga[(k, k)], a[(k, k)]);
        if d.abs() < 1e-300 {
            return None;
        }
        cost += n / (d * d);
        let dn = 2.0 * daga[(k, k)];
        grad += (dn * d - 2.0 * n * da[(k, k)]) / (d * d * d);
    }
    (cost.is_finite() && grad.is_finite()).then_some(LooEval { cost, grad })
}

impl RbfModel {
    pub fn fit(space: &ParamSpace, members: &[(Vec<f64>, &Volume)]) -> Result<Self> {
        check_members(members)?;
        let centers: Vec<Vec<f64>> = members.iter().map(|(p, _)| space.to_unit(p)).collect();
        let n = centers.len();
        let mut gram = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let s: f64 = members[i].1.values.iter().zip(&members[j].1.values).map(|(a, b)| *a as f64 * *b as f64).sum();
                gram[(i, j)] = s;
                gram[(j, i)] = s;
            }
        }
        // start from the mean nearest-neighbour spacing
        let mut spacing = 0.0;
        for i in 0..n {
            let nn = (0..n).filter(|&j| j != i).map(|j| euclid(&centers[i], &centers[j])).fold(f64::INFINITY, f64::min);
            spacing += if nn.is_finite() { nn } else { 1.0 };
        }
        let mut s = (spacing / n as f64).max(1e-3).ln();
        if n == 1 {
            return Ok(Self { width: s.exp(), loo_cost: 0.0, centers });
        }
        let eval = |s: f64| loo(&centers, &gram, s.exp()).map(|e| (e.cost, e.grad * s.exp()));
        let Some((mut cost, mut grad)) = eval(s) else {
            return Err(Error::Invalid("rbf: kernel matrix is singular at the initial width".into()));
        };
        let mut step = 0.1;
        for _ in 0..200 {
            if grad.abs() < 1e-12 * cost.max(1e-300) {
                break;
            }
            // normalized gradient step on log width with backtracking
            let dir = -grad.signum();
            let mut accepted = false;
            for _ in 0..30 {
                let s_new = s + dir * step;
                if let Some((c, gr)) = eval(s_new) {
                    if c < cost {
                        s = s_new;
                        cost = c;
                        grad = gr;
                        step *= 1.5;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !accepted || step < 1e-8 {
                break;
            }
        }
        Ok(Self { width: s.exp(), loo_cost: cost, centers })
    }

    pub fn predict(&self, space: &ParamSpace, members: &[(Vec<f64>, &Volume)], query: &[f64]) -> Result<Volume> {
        check_members(members)?;
        if members.len() != self.centers.len() {
            return Err(Error::Mismatch("rbf: member count differs from the fitted model".into()));
        }
        let (phi, _) = kernel_matrix(&self.centers, self.width);
        let q = space.to_unit(query);
        let k = DVector::from_iterator(self.centers.len(), self.centers.iter().map(|c| {
            let r = euclid(c, &q);
            (-(r * r) / (self.width * self.width)).exp()
        }));
        let w = phi
            .lu()
            .solve(&k)
            .ok_or_else(|| Error::Invalid("rbf: kernel matrix is singular".into()))?;
        let weights: Vec<(usize, f64)> = w.iter().copied().enumerate().collect();
        blend(members, &weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{simulate, Normalization, SimParams};

    fn members() -> Vec<(Vec<f64>, Volume)> {
        let space = ParamSpace::synthetic();
        [[0.5, -0.5, 0.2, 0.1], [1.0, 0.0, 0.5, 0.5], [1.5, 0.5, 0.8, 0.9], [2.0, 0.9, 0.1, 0.3]]
            .iter()
            .map(|p| {
                let v = simulate(&SimParams::new(space.clone(), p.to_vec()).unwrap(), [6, 5, 4]).unwrap();
                let v = Volume { range: Normalization::new(-0.1, 2.1).unwrap(), ..v };
                (p.to_vec(), v)
            })
            .collect()
    }

    fn refs(m: &[(Vec<f64>, Volume)]) -> Vec<(Vec<f64>, &Volume)> {
        m.iter().map(|(p, v)| (p.clone(), v)).collect()
    }

    #[test]
    fn idw_at_member_returns_member() {
        let m = members();
        let r = refs(&m);
        let out = idw(&ParamSpace::synthetic(), &r, &m[2].0, 1).unwrap();
        assert_eq!(out.values, m[2].1.values);
    }

    #[test]
    fn idw_is_convex() {
        let m = members();
        let r = refs(&m);
        let out = idw(&ParamSpace::synthetic(), &r, &[1.2, 0.1, 0.4, 0.5], 3).unwrap();
        for (i, v) in out.values.iter().enumerate() {
            let lo = m.iter().map(|(_, x)| x.values[i]).fold(f32::INFINITY, f32::min);
            let hi = m.iter().map(|(_, x)| x.values[i]).fold(f32::NEG_INFINITY, f32::max);
            assert!(*v >= lo - 1e-6 && *v <= hi + 1e-6);
        }
        assert!(idw(&ParamSpace::synthetic(), &r, &[1.0; 4], 5).is_err());
        assert!(idw(&ParamSpace::synthetic(), &[], &[1.0; 4], 1).is_err());
    }

    #[test]
    fn loo_gradient_matches_differences() {
        let m = members();
        let space = ParamSpace::synthetic();
        let centers: Vec<Vec<f64>> = m.iter().map(|(p, _)| space.to_unit(p)).collect();
        let n = m.len();
        let gram = DMatrix::from_fn(n, n, |i, j| {
            m[i].1.values.iter().zip(&m[j].1.values).map(|(a, b)| *a as f64 * *b as f64).sum()
        });
        let w = 0.4;
        let h = 1e-5;
        let fd = (loo(&centers, &gram, w + h).unwrap().cost - loo(&centers, &gram, w - h).unwrap().cost) / (2.0 * h);
        let an = loo(&centers, &gram, w).unwrap().grad;
        assert!((fd - an).abs() <= 1e-4 * an.abs().max(1.0), "fd {fd} analytic {an}");
    }

    #[test]
    fn rbf_interpolates_members() {
        let m = members();
        let r = refs(&m);
        let space = ParamSpace::synthetic();
        let model = RbfModel::fit(&space, &r).unwrap();
        assert!(model.width > 0.0);
        let out = model.predict(&space, &r, &m[1].0).unwrap();
        for (a, b) in out.values.iter().zip(&m[1].1.values) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}
