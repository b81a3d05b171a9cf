use serde::{Deserialize, Serialize};

use super::dense::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-5, beta1: 0.0, beta2: 0.999, eps: 1e-8 }
    }
}

/// Cosine decay from `lr` at step 0 to `lr · final_fraction` at `total`.
pub fn cosine_lr(lr: f32, final_fraction: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return lr;
    }
    let x = (step.min(total) as f64 / total as f64 * std::f64::consts::PI).cos();
    let f = final_fraction as f64;
    (lr as f64 * (f + (1.0 - f) * 0.5 * (1.0 + x))) as f32
}

/// Bias-corrected Adam moments for a list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        let zeros = |s: &&[usize]| vec![0.0; s.iter().product()];
        Self {
            config,
            first: shapes.iter().map(zeros).collect(),
            second: shapes.iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, k: usize) -> &[f32] {
        &self.first[k]
    }

    /// Applies one update. `grads[k]` of `None` means a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) {
        assert_eq!(params.len(), self.first.len(), "adam: parameter count changed");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            assert_eq!(m.len(), p.len(), "adam: moment shape mismatch");
            let g = grads[k].map(|t| t.data());
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                *w -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
            }
        }
    }
}
