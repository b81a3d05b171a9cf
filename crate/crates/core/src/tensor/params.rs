use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::adam::{AdamConfig, AdamState};
use super::dense::Tensor;
use super::graph::{Grads, Graph, Var};
use super::spectral::PowerIteration;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors of one network, with optional spectral-norm state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    spectral: Vec<Option<PowerIteration>>,
}

/// Graph handles for every parameter of a [`ParamStore`].
pub struct Bound {
    leaves: Vec<Var>,
    effective: Vec<Var>,
}

impl Bound {
    /// The value a layer should use: the spectrally normalized weight when
    /// the parameter has spectral-norm state, otherwise the raw parameter.
    pub fn get(&self, id: ParamId) -> Var {
        self.effective[id.0]
    }
}

/// Uniform fan-in scaled initialization, `U(-√(6/fan_in), √(6/fan_in)) · gain`.
pub fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f32) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt() * gain;
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Registers a parameter. With `spectral`, a random unit `u` is drawn
    /// from `rng` for the weight's row space.
    pub fn add(&mut self, name: &str, tensor: Tensor, spectral: Option<&mut ChaCha8Rng>) -> ParamId {
        let sn = spectral.map(|rng| {
            let rows = tensor.shape()[0];
            PowerIteration::new((0..rows).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        });
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.spectral.push(sn);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn spectral_u(&self, id: ParamId) -> Option<&[f32]> {
        self.spectral[id.0].as_ref().map(|p| p.u.as_slice())
    }

    /// Adds every parameter to `g`: as differentiable leaves when `trainable`,
    /// as constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let mut leaves = Vec::with_capacity(self.len());
        let mut effective = Vec::with_capacity(self.len());
        for (t, sn) in self.tensors.iter().zip(&self.spectral) {
            let v = if trainable { g.leaf(t.clone()) } else { g.input(t.clone()) };
            leaves.push(v);
            effective.push(match sn {
                Some(p) => g.spectral_normalize(v, &p.u)?,
                None => v,
            });
        }
        Ok(Bound { leaves, effective })
    }

    /// One power iteration for every spectrally normalized weight.
    pub fn power_step(&mut self) {
        for (t, sn) in self.tensors.iter().zip(self.spectral.iter_mut()) {
            if let Some(p) = sn {
                p.step(t.data(), t.shape()[0]);
            }
        }
    }

    pub fn adam(&self, config: AdamConfig) -> AdamState {
        let shapes: Vec<&[usize]> = self.tensors.iter().map(|t| t.shape()).collect();
        AdamState::new(config, &shapes)
    }

    pub fn apply(&mut self, state: &mut AdamState, bound: &Bound, grads: &Grads) {
        let g: Vec<Option<&Tensor>> = bound.leaves.iter().map(|v| grads.get(*v)).collect();
        let mut params: Vec<&mut Tensor> = self.tensors.iter_mut().collect();
        state.step(&mut params, &g);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    /// Records in checkpoint order. Spectral state is stored as `<name>#u`.
    pub fn records(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for ((name, t), sn) in self.names.iter().zip(&self.tensors).zip(&self.spectral) {
            out.push((name.clone(), t.clone()));
            if let Some(p) = sn {
                out.push((format!("{name}#u"), Tensor::new(vec![p.u.len()], p.u.clone()).expect("u shape")));
            }
        }
        out
    }

    /// Overwrites values from checkpoint records; names and shapes must match
    /// the parameters this store was built with.
    pub fn load_records(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let lookup = |name: &str| records.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        for k in 0..self.tensors.len() {
            let name = &self.names[k];
            let t = lookup(name).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != self.tensors[k].shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: checkpoint shape {:?}, model expects {:?}",
                    t.shape(),
                    self.tensors[k].shape()
                )));
            }
            self.tensors[k] = t.clone();
            if let Some(p) = &mut self.spectral[k] {
                let u = lookup(&format!("{name}#u"))
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks spectral state for {name}")))?;
                if u.len() != p.u.len() {
                    return Err(Error::Format(format!("spectral state for {name} has wrong length")));
                }
                p.u = u.data().to_vec();
            }
        }
        Ok(())
    }
}
