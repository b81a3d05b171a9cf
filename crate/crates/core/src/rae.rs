//! Ray autoencoder: a 1D convolutional residual autoencoder that compresses
//! every ray of a view-dependent volume to `(L0 / 2^n_r) × t` latent values.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleManifest, Member, Normalization};
use crate::error::{Error, Result};
use crate::io::{read_json, read_raw_f32, short_digest, write_json, write_raw_f32};
use crate::nn::{Conv, ResBlock, Resample};
use crate::tensor::{checkpoint, cosine_lr, AdamConfig, Bound, Graph, ParamStore, Tensor, Var};
use crate::view::{extract_rays, sample_view, ViewConfig, ViewDependentVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaeConfig {
    pub k_r: usize,
    pub t: usize,
    pub n_r: usize,
    pub lr: f32,
    /// Learning rate at the last step as a fraction of `lr` (cosine decay).
    pub lr_final_fraction: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub bins: usize,
    pub eps_h: f32,
    /// Histogram over all training targets instead of per batch.
    pub global_histogram: bool,
    pub seed: u64,
}

impl Default for RaeConfig {
    fn default() -> Self {
        Self {
            k_r: 64,
            t: 3,
            n_r: 4,
            lr: 5e-5,
            lr_final_fraction: 1.0,
            batch_size: 1024,
            epochs: 20,
            bins: 32,
            eps_h: 1e-3,
            global_histogram: false,
            seed: 0,
        }
    }
}

impl RaeConfig {
    pub fn reduction(&self) -> usize {
        1 << self.n_r
    }

    pub fn validate(&self, ray_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.k_r == 0 || self.t == 0 || self.n_r == 0 {
            return bad(format!("rae: k_r, t and n_r must be positive (k_r={}, t={}, n_r={})", self.k_r, self.t, self.n_r));
        }
        if ray_len == 0 || ray_len % self.reduction() != 0 {
            return bad(format!("rae: ray length {ray_len} is not divisible by 2^{} = {}", self.n_r, self.reduction()));
        }
        if !(self.lr_final_fraction >= 0.0 && self.lr_final_fraction <= 1.0) {
            return bad(format!("rae: lr_final_fraction {} outside [0, 1]", self.lr_final_fraction));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.bins == 0 || !(self.eps_h >= 0.0) {
            return bad("rae: lr, batch_size and bins must be positive and eps_h non-negative".into());
        }
        Ok(())
    }
}

/// Value histogram used to weight the reconstruction loss.
#[derive(Clone, Debug)]
pub struct Histogram {
    lo: f32,
    hi: f32,
    fractions: Vec<f64>,
}

impl Histogram {
    pub fn new(values: &[f32], bins: usize) -> Self {
        let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let mut h = Self { lo, hi, fractions: vec![0.0; bins] };
        for &v in values {
            let b = h.bin(v);
            h.fractions[b] += 1.0;
        }
        let n = values.len().max(1) as f64;
        h.fractions.iter_mut().for_each(|f| *f /= n);
        h
    }

    fn bin(&self, v: f32) -> usize {
        let bins = self.fractions.len();
        if !(self.hi > self.lo) {
            return 0;
        }
        let x = (v as f64 - self.lo as f64) / (self.hi as f64 - self.lo as f64) * bins as f64;
        (x.max(0.0) as usize).min(bins - 1)
    }

    /// Per-sample weights `1 / (fraction + eps_h)`, scaled to mean 1 over `values`.
    pub fn weights(&self, values: &[f32], eps_h: f32) -> Vec<f32> {
        if !(self.hi > self.lo) {
            return vec![1.0; values.len()];
        }
        let per_bin: Vec<f64> = self.fractions.iter().map(|f| 1.0 / (f + eps_h as f64)).collect();
        let raw: Vec<f64> = values.iter().map(|&v| per_bin[self.bin(v)]).collect();
        let mean = raw.iter().sum::<f64>() / raw.len().max(1) as f64;
        if !mean.is_finite() || mean <= 0.0 {
            return vec![1.0; values.len()];
        }
        raw.iter().map(|w| (w / mean) as f32).collect()
    }
}

/// Information-driven weighted L1: `mean(w · |pred − target|)` with weights
/// from the histogram of `target`.
pub fn weighted_l1_loss(pred: &[f32], target: &[f32], bins: usize, eps_h: f32) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!("loss: {} predictions for {} targets", pred.len(), target.len())));
    }
    let w = Histogram::new(target, bins).weights(target, eps_h);
    let total: f64 = pred.iter().zip(target).zip(&w).map(|((p, t), w)| *w as f64 * (p - t).abs() as f64).sum();
    Ok(total / pred.len() as f64)
}

#[derive(Clone, Debug)]
struct Layers {
    enc_lift: Conv,
    enc_blocks: Vec<ResBlock>,
    enc_proj: Conv,
    dec_lift: Conv,
    dec_blocks: Vec<ResBlock>,
    dec_out: Conv,
}

#[derive(Clone, Debug)]
pub struct RayAutoencoder {
    config: RaeConfig,
    ray_len: usize,
    store: ParamStore,
    layers: Layers,
}

impl RayAutoencoder {
    pub fn new(config: RaeConfig, ray_len: usize) -> Result<Self> {
        config.validate(ray_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (k, t) = (config.k_r, config.t);
        let s = &mut store;
        let r = &mut rng;
        let enc_lift = Conv::new(s, r, "enc.lift", k, 1, &[3], 1.0);
        let enc_blocks = (0..config.n_r)
            .map(|i| ResBlock::new(s, r, &format!("enc.block{i}"), k, k, &[3], Resample::Down))
            .collect();
        let enc_proj = Conv::new(s, r, "enc.proj", t, k, &[3], 0.1);
        let dec_lift = Conv::new(s, r, "dec.lift", k, t, &[3], 1.0);
        let dec_blocks = (0..config.n_r)
            .map(|i| ResBlock::new(s, r, &format!("dec.block{i}"), k, k, &[3], Resample::Up))
            .collect();
        let dec_out = Conv::new(s, r, "dec.out", 1, k, &[3], 0.1);
        let layers = Layers { enc_lift, enc_blocks, enc_proj, dec_lift, dec_blocks, dec_out };
        Ok(Self { config, ray_len, store, layers })
    }

    pub fn config(&self) -> &RaeConfig {
        &self.config
    }

    pub fn ray_len(&self) -> usize {
        self.ray_len
    }

    pub fn latent_len(&self) -> usize {
        self.ray_len / self.config.reduction()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub(crate) fn bind(&self, g: &mut Graph) -> Result<Bound> {
        self.store.bind(g, false)
    }

    /// `[n, 1, L0]` rays to `[n, t, L0/s_r]` latents inside `g`.
    pub(crate) fn encode_var(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let l = &self.layers;
        let mut h = l.enc_lift.apply(g, p, x)?;
        h = g.relu(h);
        for b in &l.enc_blocks {
            h = b.apply(g, p, h, &[2], 1)?;
        }
        h = l.enc_proj.apply(g, p, h)?;
        Ok(g.tanh(h))
    }

    /// `[n, t, L0/s_r]` latents to `[n, 1, L0]` rays inside `g`.
    pub(crate) fn decode_var(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let l = &self.layers;
        let mut h = l.dec_lift.apply(g, p, z)?;
        h = g.relu(h);
        for b in &l.dec_blocks {
            h = b.apply(g, p, h, &[2], 1)?;
        }
        h = l.dec_out.apply(g, p, h)?;
        Ok(g.tanh(h))
    }

    fn check_rays(&self, rays: &Tensor) -> Result<usize> {
        match rays.shape() {
            [n, 1, l] if *l == self.ray_len => Ok(*n),
            s => Err(Error::Shape(format!("rae expects rays [n, 1, {}], got {s:?}", self.ray_len))),
        }
    }

    pub fn encode(&self, rays: &Tensor) -> Result<Tensor> {
        self.check_rays(rays)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g)?;
        let x = g.input(rays.clone());
        let z = self.encode_var(&mut g, &p, x)?;
        Ok(g.value(z).clone())
    }

    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        match latents.shape() {
            [_, t, l] if *t == self.config.t && *l == self.latent_len() => {}
            s => {
                return Err(Error::Shape(format!(
                    "rae expects latents [n, {}, {}], got {s:?}",
                    self.config.t,
                    self.latent_len()
                )))
            }
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g)?;
        let z = g.input(latents.clone());
        let y = self.decode_var(&mut g, &p, z)?;
        Ok(g.value(y).clone())
    }

    /// Encode then decode, in batches of `config.batch_size` rays.
    pub fn reconstruct(&self, rays: &Tensor) -> Result<Tensor> {
        let n = self.check_rays(rays)?;
        let l = self.ray_len;
        let mut out = Vec::with_capacity(rays.len());
        for chunk in rays.data().chunks(self.config.batch_size * l) {
            let batch = Tensor::new(vec![chunk.len() / l, 1, l], chunk.to_vec())?;
            out.extend_from_slice(self.decode(&self.encode(&batch)?)?.data());
        }
        Tensor::new(vec![n, 1, l], out)
    }
}

/// Outcome of a training run. When `diverged` is set, `model` holds the last
/// parameters for which every value was finite.
#[derive(Clone, Debug)]
pub struct RaeTraining {
    pub model: RayAutoencoder,
    pub loss_curve: Vec<f64>,
    pub diverged: Option<String>,
}

/// Gathers the rays of `members` for one view as a `[n, 1, L0]` batch.
pub fn collect_rays<'a>(
    manifest: &EnsembleManifest,
    dir: &Path,
    members: impl IntoIterator<Item = &'a Member>,
    view: &ViewConfig,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for m in members {
        let v = manifest.load_volume(dir, m)?.normalize(manifest.normalization)?;
        let vdv = sample_view(&v, view)?;
        data.extend_from_slice(&vdv.values);
        n += view.rays();
    }
    if n == 0 {
        return Err(Error::Invalid("no members to collect rays from".into()));
    }
    Tensor::new(vec![n, 1, view.ray_len], data)
}

/// Trains a freshly initialized autoencoder on `rays` (`[n, 1, L0]`) with the
/// weighted L1 loss.
pub fn train_rae(config: &RaeConfig, rays: &Tensor) -> Result<RaeTraining> {
    let ray_len = match rays.shape() {
        [n, 1, l] if *n > 0 => *l,
        s => return Err(Error::Shape(format!("training rays must be [n, 1, L0], got {s:?}"))),
    };
    let mut model = RayAutoencoder::new(config.clone(), ray_len)?;
    let mut adam = model.store.adam(AdamConfig { lr: config.lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let n = rays.shape()[0];
    let global = config.global_histogram.then(|| Histogram::new(rays.data(), config.bins));
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let total_steps = config.epochs * n.div_ceil(config.batch_size);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for idx in order.chunks(config.batch_size) {
            let mut batch = Vec::with_capacity(idx.len() * ray_len);
            for &i in idx {
                batch.extend_from_slice(&rays.data()[i * ray_len..(i + 1) * ray_len]);
            }
            let target = Tensor::new(vec![idx.len(), 1, ray_len], batch)?;
            let weights = match &global {
                Some(h) => h.weights(target.data(), config.eps_h),
                None => Histogram::new(target.data(), config.bins).weights(target.data(), config.eps_h),
            };
            adam.config.lr = cosine_lr(config.lr, config.lr_final_fraction, step, total_steps);
            step += 1;
            let backup = model.store.clone();
            model.store.power_step();
            let mut g = Graph::new();
            let p = model.store.bind(&mut g, true)?;
            let x = g.input(target.clone());
            let z = model.encode_var(&mut g, &p, x)?;
            let y = model.decode_var(&mut g, &p, z)?;
            let loss = g.mean_abs_error(y, &target, Some(weights))?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                model.store = backup;
                let msg = format!("non-finite loss at epoch {epoch}, step {steps}");
                tracing::error!("{msg}");
                return Ok(RaeTraining { model, loss_curve: curve, diverged: Some(msg) });
            }
            let grads = g.backward(loss);
            model.store.apply(&mut adam, &p, &grads);
            if !model.store.all_finite() {
                model.store = backup;
                let msg = format!("non-finite parameters at epoch {epoch}, step {steps}");
                tracing::error!("{msg}");
                return Ok(RaeTraining { model, loss_curve: curve, diverged: Some(msg) });
            }
            sum += value;
            steps += 1;
        }
        let mean = sum / steps as f64;
        tracing::info!(epoch, loss = mean, "rae epoch");
        curve.push(mean);
    }
    Ok(RaeTraining { model, loss_curve: curve, diverged: None })
}

/// Per-ray latent codes of one view: `[W, H, L0/s_r, t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RayLatentField {
    pub view: ViewConfig,
    pub values: Tensor,
    pub normalization: Normalization,
    pub params: Option<Vec<f64>>,
    pub rae_id: String,
}

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    view: ViewConfig,
    shape: Vec<usize>,
    min: f32,
    max: f32,
    params: Option<Vec<f64>>,
    rae_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

impl RayLatentField {
    /// From `[W·H, t, Ls]` encoder output.
    pub fn from_latents(view: ViewConfig, latents: &Tensor, normalization: Normalization, rae_id: &str) -> Result<Self> {
        let [n, t, ls] = latents.shape() else {
            return Err(Error::Shape(format!("latents must be rank 3, got {:?}", latents.shape())));
        };
        if *n != view.rays() {
            return Err(Error::Shape(format!("{n} latent rays for a {}×{} view", view.width, view.height)));
        }
        let values = latents.permute(&[0, 2, 1])?.reshape(&[view.width, view.height, *ls, *t])?;
        Ok(Self { view, values, normalization, params: None, rae_id: rae_id.to_string() })
    }

    /// As `[W·H, t, Ls]` for the decoder.
    pub fn to_latents(&self) -> Result<Tensor> {
        let s = self.values.shape();
        self.values.clone().reshape(&[s[0] * s[1], s[2], s[3]])?.permute(&[0, 2, 1])
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn save(&self, base: &Path, config_hash: Option<&str>) -> Result<()> {
        let h = FieldHeader {
            view: self.view,
            shape: self.values.shape().to_vec(),
            min: self.normalization.min,
            max: self.normalization.max,
            params: self.params.clone(),
            rae_id: self.rae_id.clone(),
            config_hash: config_hash.map(String::from),
        };
        write_json(&base.with_extension("json"), &h)?;
        write_raw_f32(&base.with_extension("raw"), self.values.data())
    }

    pub fn load(base: &Path) -> Result<Self> {
        let h: FieldHeader = read_json(&base.with_extension("json"))?;
        let values = Tensor::new(h.shape, read_raw_f32(&base.with_extension("raw"))?)?;
        Ok(Self {
            view: h.view,
            values,
            normalization: Normalization { min: h.min, max: h.max },
            params: h.params,
            rae_id: h.rae_id,
        })
    }
}

/// A trained autoencoder bound to the view and dataset normalization it was
/// trained for.
#[derive(Clone, Debug)]
pub struct RaeCheckpoint {
    pub model: RayAutoencoder,
    pub view: ViewConfig,
    pub normalization: Normalization,
    pub loss_curve: Vec<f64>,
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct RaeMeta {
    id: String,
    config: RaeConfig,
    ray_len: usize,
    view: ViewConfig,
    normalization: Normalization,
    loss_curve: Vec<f64>,
    #[serde(default)]
    config_hash: Option<String>,
}

impl RaeCheckpoint {
    /// Content digest of the weights; predictors record it to validate pairs.
    pub fn id(&self) -> String {
        short_digest(&checkpoint::encode(&self.model.store.records()))
    }

    /// Writes `<base>.vdls` and `<base>.json`.
    pub fn save(&self, base: &Path) -> Result<()> {
        let bytes = checkpoint::encode(&self.model.store.records());
        let meta = RaeMeta {
            id: short_digest(&bytes),
            config: self.model.config.clone(),
            ray_len: self.model.ray_len,
            view: self.view,
            normalization: self.normalization,
            loss_curve: self.loss_curve.clone(),
            config_hash: self.config_hash.clone(),
        };
        write_json(&base.with_extension("json"), &meta)?;
        let path = base.with_extension("vdls");
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn load(base: &Path) -> Result<Self> {
        let meta: RaeMeta = read_json(&base.with_extension("json"))?;
        let path = base.with_extension("vdls");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if short_digest(&bytes) != meta.id {
            return Err(Error::Mismatch(format!("{}: weights do not match recorded id {}", path.display(), meta.id)));
        }
        let mut model = RayAutoencoder::new(meta.config, meta.ray_len)?;
        model.store.load_records(&checkpoint::decode(&bytes)?)?;
        Ok(Self {
            model,
            view: meta.view,
            normalization: meta.normalization,
            loss_curve: meta.loss_curve,
            config_hash: meta.config_hash,
        })
    }

    /// Encodes every ray of `vdv`.
    pub fn encode_field(&self, vdv: &ViewDependentVolume) -> Result<RayLatentField> {
        if vdv.normalization != self.normalization {
            return Err(Error::Mismatch(format!(
                "view data normalized with {:?}, autoencoder trained with {:?}",
                vdv.normalization, self.normalization
            )));
        }
        if vdv.config.ray_len != self.model.ray_len || vdv.config.axis != self.view.axis {
            return Err(Error::Mismatch(format!("view {:?} does not match autoencoder view {:?}", vdv.config, self.view)));
        }
        let rays = extract_rays(vdv);
        let l = self.model.ray_len;
        let mut out = Vec::with_capacity(vdv.config.rays() * self.model.latent_len() * self.model.config.t);
        for chunk in rays.data().chunks(self.model.config.batch_size * l) {
            let batch = Tensor::new(vec![chunk.len() / l, 1, l], chunk.to_vec())?;
            out.extend_from_slice(self.model.encode(&batch)?.data());
        }
        let latents = Tensor::new(vec![vdv.config.rays(), self.model.config.t, self.model.latent_len()], out)?;
        let mut field = RayLatentField::from_latents(vdv.config, &latents, self.normalization, &self.id())?;
        field.params = vdv.params.clone();
        Ok(field)
    }

    /// Decodes a latent field to view-dependent data in `[-1, 1]`.
    pub fn decode_field(&self, field: &RayLatentField) -> Result<ViewDependentVolume> {
        let latents = field.to_latents()?;
        let (t, ls, l) = (self.model.config.t, self.model.latent_len(), self.model.ray_len);
        let mut out = Vec::with_capacity(field.view.rays() * l);
        for chunk in latents.data().chunks(self.model.config.batch_size * t * ls) {
            let batch = Tensor::new(vec![chunk.len() / (t * ls), t, ls], chunk.to_vec())?;
            out.extend_from_slice(self.model.decode(&batch)?.data());
        }
        let mut v = ViewDependentVolume::new(field.view, out, self.normalization)?;
        v.params = field.params.clone();
        Ok(v)
    }
}
