//! Power iteration for spectral normalization.
//!
//! A weight of shape `[rows, ..]` is treated as a `rows × cols` matrix. The
//! persistent left vector `u` is advanced by one iteration per optimizer
//! step; forward passes derive `v = Wᵀu / ‖Wᵀu‖` and `σ = uᵀWv = ‖Wᵀu‖`.

use super::graph::SPECTRAL_EPS;

fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > SPECTRAL_EPS as f64 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

fn wt_u(w: &[f32], rows: usize, u: &[f32]) -> Vec<f64> {
    let cols = w.len() / rows;
    let mut out = vec![0.0f64; cols];
    for (r, &ur) in u.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *o += ur as f64 * wv as f64;
        }
    }
    out
}

/// Returns `(v, σ)` for the current `u` without modifying it.
pub fn right_vector(w: &[f32], rows: usize, u: &[f32]) -> (Vec<f32>, f32) {
    let mut v = wt_u(w, rows, u);
    let sigma = normalize(&mut v);
    if sigma <= SPECTRAL_EPS as f64 {
        v.iter_mut().for_each(|x| *x = 0.0);
    }
    (v.into_iter().map(|x| x as f32).collect(), sigma as f32)
}

/// Persistent power-iteration state for one weight.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerIteration {
    pub u: Vec<f32>,
}

impl PowerIteration {
    pub fn new(u: Vec<f32>) -> Self {
        let mut u64: Vec<f64> = u.iter().map(|&x| x as f64).collect();
        normalize(&mut u64);
        Self { u: u64.into_iter().map(|x| x as f32).collect() }
    }

    /// One iteration `u ← W Wᵀu / ‖·‖`; returns the updated σ estimate.
    /// For a (numerically) zero matrix `u` is left as is.
    pub fn step(&mut self, w: &[f32], rows: usize) -> f32 {
        let cols = w.len() / rows;
        let mut v = wt_u(w, rows, &self.u);
        if normalize(&mut v) <= SPECTRAL_EPS as f64 {
            return 0.0;
        }
        let mut u: Vec<f64> = (0..rows)
            .map(|r| w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(a, b)| *a as f64 * b).sum())
            .collect();
        let sigma = normalize(&mut u);
        if sigma > SPECTRAL_EPS as f64 {
            self.u = u.into_iter().map(|x| x as f32).collect();
        }
        right_vector(w, rows, &self.u).1
    }

    pub fn sigma(&self, w: &[f32], rows: usize) -> f32 {
        right_vector(w, rows, &self.u).1
    }
}
