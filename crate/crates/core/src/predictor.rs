//! View-dependent latent predictor: a 3D convolutional network from
//! simulation parameters to the ray latent field of one view.
//!
//! The parameter vector is mapped to `[-1, 1]` per dimension, lifted by a
//! fully connected layer to a seed tensor `[16·k_v, W/2^a, H/2^a, Ls/2^b]`,
//! and up-sampled by `a` residual blocks. Every block doubles the two image
//! axes; the first `b` also double the latent depth axis. Channels halve per
//! block down to `k_v`, and a final convolution projects to `t` channels
//! with `tanh`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::{Normalization, ParamSpace};
use crate::error::{Error, Result};
use crate::io::{read_json, short_digest, write_json};
use crate::nn::{Conv, ResBlock, Resample};
use crate::rae::{RaeCheckpoint, RayLatentField};
use crate::tensor::{checkpoint, cosine_lr, kaiming_uniform, AdamConfig, Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::view::{ViewConfig, ViewDependentVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub k_v: usize,
    /// Up-sampling blocks; each doubles the image axes.
    pub a: usize,
    /// Leading blocks that also double the latent depth axis.
    pub b: usize,
    pub lr: f32,
    pub lr_final_fraction: f32,
    pub epochs: usize,
    /// Standard deviation of Gaussian noise added to the `[-1, 1]`-mapped
    /// parameters of each training step.
    pub input_noise: f64,
    /// Group-lasso strength on the input columns of the fully connected
    /// layer, applied as a proximal step after every update. In units of
    /// the per-element RMS of a column, scaled by the current learning rate.
    pub input_group_l1: f32,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { k_v: 64, a: 6, b: 3, lr: 5e-5, lr_final_fraction: 1.0, epochs: 100, input_noise: 0.0, input_group_l1: 0.0, seed: 0 }
    }
}

/// Tensor extents of every stage, derived from configuration alone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorLayout {
    /// `[W/2^a, H/2^a, Ls/2^b, 16·k_v]`.
    pub seed: [usize; 4],
    /// Input and output channels of each block.
    pub channels: Vec<(usize, usize)>,
    /// `[W, H, Ls, t]`.
    pub output: [usize; 4],
}

impl PredictorLayout {
    pub fn new(config: &PredictorConfig, width: usize, height: usize, latent_len: usize, t: usize) -> Result<Self> {
        let bad = |m: String| Err(Error::Invalid(m));
        if config.k_v == 0 || t == 0 {
            return bad("predictor: k_v and t must be positive".into());
        }
        if config.b > config.a {
            return bad(format!("predictor: depth stages b={} exceed image stages a={}", config.b, config.a));
        }
        let (fa, fb) = (1usize << config.a, 1usize << config.b);
        if width % fa != 0 || height % fa != 0 || width < fa || height < fa {
            return bad(format!("predictor: image {width}×{height} not divisible by 2^a = {fa}"));
        }
        if latent_len % fb != 0 || latent_len < fb {
            return bad(format!("predictor: latent length {latent_len} not divisible by 2^b = {fb}"));
        }
        let c0 = 16 * config.k_v;
        let channels = (0..config.a)
            .map(|i| ((c0 >> i).max(config.k_v), (c0 >> (i + 1)).max(config.k_v)))
            .collect();
        Ok(Self {
            seed: [width / fa, height / fa, latent_len / fb, c0],
            channels,
            output: [width, height, latent_len, t],
        })
    }

    pub fn seed_len(&self) -> usize {
        self.seed.iter().product()
    }
}

#[derive(Clone, Debug)]
struct Layers {
    fc_w: ParamId,
    fc_b: ParamId,
    blocks: Vec<ResBlock>,
    proj: Conv,
}

#[derive(Clone, Debug)]
pub struct Predictor {
    config: PredictorConfig,
    layout: PredictorLayout,
    space: ParamSpace,
    store: ParamStore,
    layers: Layers,
}

impl Predictor {
    pub fn new(config: PredictorConfig, space: ParamSpace, view: &ViewConfig, latent_len: usize, t: usize) -> Result<Self> {
        space.validate()?;
        let layout = PredictorLayout::new(&config, view.width, view.height, latent_len, t)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = space.dim();
        let n = layout.seed_len();
        let fc_w = store.add("fc.w", kaiming_uniform(&mut rng, &[n, d], d, 1.0), None);
        let bb = 1.0 / (d as f32).sqrt();
        let fc_b = store.add("fc.b", Tensor::from_fn(&[n], |_| rng.random_range(-bb..bb)), None);
        let blocks = layout
            .channels
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| ResBlock::new(&mut store, &mut rng, &format!("block{i}"), cin, cout, &[3, 3, 3], Resample::Up))
            .collect();
        let last = layout.channels.last().map_or(layout.seed[3], |c| c.1);
        let proj = Conv::new(&mut store, &mut rng, "proj", t, last, &[3, 3, 3], 0.1);
        Ok(Self { config, layout, space, store, layers: Layers { fc_w, fc_b, blocks, proj } })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.config
    }

    pub fn layout(&self) -> &PredictorLayout {
        &self.layout
    }

    pub fn space(&self) -> &ParamSpace {
        &self.space
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> Result<Bound> {
        self.store.bind(g, false)
    }

    /// Raw parameters `[d]` to the latent grid `[t, W, H, Ls]` inside `g`.
    pub(crate) fn forward_var(&self, g: &mut Graph, p: &Bound, params: Var) -> Result<Var> {
        let (scale, shift): (Vec<f32>, Vec<f32>) = self
            .space
            .ranges
            .iter()
            .map(|&(lo, hi)| ((2.0 / (hi - lo)) as f32, (-(hi + lo) / (hi - lo)) as f32))
            .unzip();
        let x = g.affine(params, &scale, &shift)?;
        let mut h = g.linear(x, p.get(self.layers.fc_w), p.get(self.layers.fc_b))?;
        h = g.relu(h);
        let [w, hh, d, c] = self.layout.seed;
        h = g.reshape(h, &[c, w, hh, d])?;
        for (i, block) in self.layers.blocks.iter().enumerate() {
            let axes: &[usize] = if i < self.config.b { &[1, 2, 3] } else { &[1, 2] };
            h = block.apply(g, p, h, axes, 3)?;
        }
        h = self.layers.proj.apply(g, p, h)?;
        Ok(g.tanh(h))
    }

    /// `[t, W, H, Ls]` network output as `[W·H, t, Ls]` decoder input.
    pub(crate) fn to_rays_var(&self, g: &mut Graph, out: Var) -> Result<Var> {
        let [w, h, ls, t] = self.layout.output;
        let x = g.permute(out, &[1, 2, 0, 3])?;
        g.reshape(x, &[w * h, t, ls])
    }

    fn check_params(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.space.dim() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "expected {} finite parameter values, got {values:?}",
                self.space.dim()
            )));
        }
        Ok(())
    }

    /// Network output `[t, W, H, Ls]` for raw parameter values.
    pub fn forward(&self, values: &[f64]) -> Result<Tensor> {
        self.check_params(values)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g)?;
        let x = g.input(Tensor::new(vec![values.len()], values.iter().map(|&v| v as f32).collect())?);
        let y = self.forward_var(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }
}

/// Network-layout target `[t, W, H, Ls]` for an encoded field `[W, H, Ls, t]`.
pub fn field_target(field: &RayLatentField) -> Result<Tensor> {
    field.values.permute(&[3, 0, 1, 2])
}

#[derive(Clone, Debug)]
pub struct PredictorTraining {
    pub model: Predictor,
    pub loss_curve: Vec<f64>,
    pub diverged: Option<String>,
}

/// Trains with batch size 1 and plain mean L1 against encoded latent fields.
pub fn train_predictor(
    config: &PredictorConfig,
    space: &ParamSpace,
    view: &ViewConfig,
    samples: &[(Vec<f64>, RayLatentField)],
) -> Result<PredictorTraining> {
    let first = samples.first().ok_or_else(|| Error::Invalid("no training samples for the predictor".into()))?;
    let [_, _, ls, t] = first.1.shape() else {
        return Err(Error::Shape("latent field must be rank 4".into()));
    };
    let mut model = Predictor::new(config.clone(), space.clone(), view, *ls, *t)?;
    let targets = samples
        .iter()
        .map(|(params, field)| {
            if field.view != *view || field.shape() != model.layout.output {
                return Err(Error::Mismatch(format!(
                    "latent field {:?} for view {:?} does not match predictor output {:?}",
                    field.shape(),
                    field.view,
                    model.layout.output
                )));
            }
            model.check_params(params)?;
            Ok((Tensor::new(vec![params.len()], params.iter().map(|&v| v as f32).collect())?, field_target(field)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut adam = model.store.adam(AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let total = config.epochs * targets.len();
    let mut step = 0;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &k in &order {
            let (x, target) = &targets[k];
            adam.config.lr = cosine_lr(config.lr, config.lr_final_fraction, step, total);
            step += 1;
            let backup = model.store.clone();
            model.store.power_step();
            let mut g = Graph::new();
            let p = model.store.bind(&mut g, true)?;
            let mut x = x.clone();
            if config.input_noise > 0.0 {
                let normal = Normal::new(0.0, config.input_noise).map_err(|e| Error::Invalid(format!("input_noise: {e}")))?;
                for (v, (lo, hi)) in x.data_mut().iter_mut().zip(&space.ranges) {
                    *v += (normal.sample(&mut rng) * 0.5 * (hi - lo)) as f32;
                }
            }
            let xv = g.input(x);
            let y = model.forward_var(&mut g, &p, xv)?;
            let loss = g.mean_abs_error(y, target, None)?;
            let value = g.value(loss).data()[0] as f64;
            let grads = value.is_finite().then(|| g.backward(loss));
            if let Some(grads) = &grads {
                model.store.apply(&mut adam, &p, grads);
                if config.input_group_l1 > 0.0 {
                    let fc = model.store.get_mut(model.layers.fc_w);
                    shrink_columns(fc.data_mut(), space.dim(), adam.config.lr * config.input_group_l1);
                }
            }
            if grads.is_none() || !model.store.all_finite() {
                model.store = backup;
                let msg = format!("non-finite loss or parameters at epoch {epoch}");
                tracing::error!("{msg}");
                return Ok(PredictorTraining { model, loss_curve: curve, diverged: Some(msg) });
            }
            sum += value;
        }
        let mean = sum / targets.len() as f64;
        tracing::info!(epoch, loss = mean, "predictor epoch");
        curve.push(mean);
    }
    Ok(PredictorTraining { model, loss_curve: curve, diverged: None })
}

/// Proximal group-lasso step on the columns of a row-major `[n, d]` matrix:
/// each column's RMS shrinks by `amount`, reaching zero at most.
fn shrink_columns(w: &mut [f32], d: usize, amount: f32) {
    let n = w.len() / d;
    for j in 0..d {
        let rms = ((0..n).map(|i| (w[i * d + j] as f64).powi(2)).sum::<f64>() / n as f64).sqrt();
        let keep = if rms > 0.0 { (1.0 - amount as f64 / rms).max(0.0) } else { 0.0 };
        for i in 0..n {
            w[i * d + j] = (w[i * d + j] as f64 * keep) as f32;
        }
    }
}

/// A trained predictor bound to one view and one autoencoder.
#[derive(Clone, Debug)]
pub struct PredictorCheckpoint {
    pub model: Predictor,
    pub view: ViewConfig,
    pub rae_id: String,
    pub normalization: Normalization,
    pub loss_curve: Vec<f64>,
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct PredictorMeta {
    id: String,
    config: PredictorConfig,
    space: ParamSpace,
    layout: PredictorLayout,
    view: ViewConfig,
    rae_id: String,
    normalization: Normalization,
    loss_curve: Vec<f64>,
    #[serde(default)]
    config_hash: Option<String>,
}

impl PredictorCheckpoint {
    pub fn id(&self) -> String {
        short_digest(&checkpoint::encode(&self.model.store.records()))
    }

    pub fn save(&self, base: &Path) -> Result<()> {
        let bytes = checkpoint::encode(&self.model.store.records());
        let meta = PredictorMeta {
            id: short_digest(&bytes),
            config: self.model.config.clone(),
            space: self.model.space.clone(),
            layout: self.model.layout.clone(),
            view: self.view,
            rae_id: self.rae_id.clone(),
            normalization: self.normalization,
            loss_curve: self.loss_curve.clone(),
            config_hash: self.config_hash.clone(),
        };
        write_json(&base.with_extension("json"), &meta)?;
        let path = base.with_extension("vdls");
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn load(base: &Path) -> Result<Self> {
        let meta: PredictorMeta = read_json(&base.with_extension("json"))?;
        let path = base.with_extension("vdls");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if short_digest(&bytes) != meta.id {
            return Err(Error::Mismatch(format!("{}: weights do not match recorded id {}", path.display(), meta.id)));
        }
        let [_, _, ls, t] = meta.layout.output;
        let mut model = Predictor::new(meta.config, meta.space, &meta.view, ls, t)?;
        if model.layout != meta.layout {
            return Err(Error::Format(format!("{}: recorded layout differs from configuration", path.display())));
        }
        model.store.load_records(&checkpoint::decode(&bytes)?)?;
        Ok(Self {
            model,
            view: meta.view,
            rae_id: meta.rae_id,
            normalization: meta.normalization,
            loss_curve: meta.loss_curve,
            config_hash: meta.config_hash,
        })
    }

    /// Rejects an autoencoder this predictor was not trained against.
    pub fn check_pair(&self, rae: &RaeCheckpoint) -> Result<()> {
        if rae.id() != self.rae_id {
            return Err(Error::Mismatch(format!("predictor expects autoencoder {}, got {}", self.rae_id, rae.id())));
        }
        if rae.view != self.view || rae.normalization != self.normalization {
            return Err(Error::Mismatch("predictor and autoencoder are bound to different views or normalizations".into()));
        }
        Ok(())
    }

    pub fn predict_latent(&self, values: &[f64]) -> Result<RayLatentField> {
        let out = self.model.forward(values)?;
        let values_t = out.permute(&[1, 2, 3, 0])?;
        Ok(RayLatentField {
            view: self.view,
            values: values_t,
            normalization: self.normalization,
            params: Some(values.to_vec()),
            rae_id: self.rae_id.clone(),
        })
    }

    /// Predicted latents decoded to view-dependent data in `[-1, 1]`.
    pub fn predict_view_data(&self, values: &[f64], rae: &RaeCheckpoint) -> Result<ViewDependentVolume> {
        self.check_pair(rae)?;
        rae.decode_field(&self.predict_latent(values)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::view::Axis;

    #[test]
    fn paper_scale_layout() {
        let cfg = PredictorConfig { k_v: 64, a: 6, b: 3, ..PredictorConfig::default() };
        let l = PredictorLayout::new(&cfg, 384, 384, 512 / 16, 3).unwrap();
        assert_eq!(l.seed, [6, 6, 4, 1024]);
        assert_eq!(l.output, [384, 384, 32, 3]);
        assert_eq!(l.channels.first(), Some(&(1024, 512)));
        assert_eq!(l.channels.last(), Some(&(64, 64)));
    }

    #[test]
    fn desk_layout() {
        let cfg = PredictorConfig { k_v: 4, a: 3, b: 1, ..PredictorConfig::default() };
        let l = PredictorLayout::new(&cfg, 64, 64, 4, 3).unwrap();
        assert_eq!(l.seed, [8, 8, 2, 64]);
        assert_eq!(l.output, [64, 64, 4, 3]);
        assert_eq!(l.channels, vec![(64, 32), (32, 16), (16, 8)]);
    }

    #[test]
    fn rejects_indivisible_extents() {
        let cfg = PredictorConfig { k_v: 4, a: 3, b: 1, ..PredictorConfig::default() };
        assert!(PredictorLayout::new(&cfg, 60, 64, 4, 3).is_err());
        assert!(PredictorLayout::new(&cfg, 64, 64, 3, 3).is_err());
        assert!(PredictorLayout::new(&PredictorConfig { b: 4, ..cfg }, 64, 64, 16, 3).is_err());
    }

    #[test]
    fn forward_shape_and_range() {
        let view = ViewConfig { axis: Axis::Z, positive: true, width: 8, height: 8, ray_len: 16 };
        let cfg = PredictorConfig { k_v: 2, a: 2, b: 1, ..PredictorConfig::default() };
        let m = Predictor::new(cfg, ParamSpace::synthetic(), &view, 4, 3).unwrap();
        let y = m.forward(&[1.0, 0.2, 0.5, 0.1]).unwrap();
        assert_eq!(y.shape(), &[3, 8, 8, 4]);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
        assert_eq!(y, m.forward(&[1.0, 0.2, 0.5, 0.1]).unwrap());
    }

    #[test]
    fn training_reduces_loss_deterministically() {
        let view = ViewConfig { axis: Axis::X, positive: true, width: 4, height: 4, ray_len: 16 };
        let norm = Normalization::new(0.0, 1.0).unwrap();
        let space = ParamSpace::synthetic();
        let samples: Vec<_> = (0..3)
            .map(|k| {
                let p = vec![0.5 + 0.5 * k as f64, 0.0, 0.5, 0.5];
                let values = Tensor::from_fn(&[4, 4, 4, 3], |i| ((i as f32) * 0.1 + k as f32).sin() * 0.5);
                (p.clone(), RayLatentField { view, values, normalization: norm, params: Some(p), rae_id: "r".into() })
            })
            .collect();
        let cfg = PredictorConfig { k_v: 2, a: 1, b: 1, lr: 2e-3, epochs: 15, ..PredictorConfig::default() };
        let a = train_predictor(&cfg, &space, &view, &samples).unwrap();
        let b = train_predictor(&cfg, &space, &view, &samples).unwrap();
        assert!(a.diverged.is_none());
        assert_eq!(a.loss_curve, b.loss_curve);
        assert!(a.loss_curve.last().unwrap() < &a.loss_curve[0]);
    }
}
