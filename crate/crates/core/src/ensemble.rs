//! Synthetic parameterized ensemble, volume persistence and normalization.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, read_raw_f32, write_json, write_raw_f32};

/// Names and ranges of the simulation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub names: Vec<String>,
    pub ranges: Vec<(f64, f64)>,
}

impl ParamSpace {
    /// The synthetic field's four parameters; `null` does not affect the field.
    pub fn synthetic() -> Self {
        Self {
            names: ["amplitude", "separation", "width", "null"].map(String::from).to_vec(),
            ranges: vec![(0.5, 2.0), (-1.0, 1.0), (0.0, 1.0), (0.0, 1.0)],
        }
    }

    pub fn dim(&self) -> usize {
        self.ranges.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranges.is_empty() || self.names.len() != self.ranges.len() {
            return Err(Error::Invalid("parameter space needs d ≥ 1 named ranges".into()));
        }
        if let Some((k, _)) = self.ranges.iter().enumerate().find(|(_, (lo, hi))| !(lo < hi)) {
            return Err(Error::Invalid(format!("parameter {} has an empty range", self.names[k])));
        }
        Ok(())
    }

    pub fn contains(&self, values: &[f64]) -> bool {
        values.len() == self.dim() && values.iter().zip(&self.ranges).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Indices of parameters outside their range.
    pub fn out_of_range(&self, values: &[f64]) -> Vec<usize> {
        values
            .iter()
            .zip(&self.ranges)
            .enumerate()
            .filter(|(_, (v, (lo, hi)))| **v < *lo || **v > *hi)
            .map(|(k, _)| k)
            .collect()
    }

    /// Per-dimension affine map of each range onto `[0, 1]`.
    pub fn to_unit(&self, values: &[f64]) -> Vec<f64> {
        values.iter().zip(&self.ranges).map(|(v, (lo, hi))| (v - lo) / (hi - lo)).collect()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.ranges.iter().map(|(lo, hi)| rng.random_range(*lo..*hi)).collect()
    }
}

/// A parameter setting together with the space it lives in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub values: Vec<f64>,
    pub space: ParamSpace,
}

impl SimParams {
    pub fn new(space: ParamSpace, values: Vec<f64>) -> Result<Self> {
        space.validate()?;
        if values.len() != space.dim() {
            return Err(Error::Invalid(format!(
                "expected {} parameter values, got {}",
                space.dim(),
                values.len()
            )));
        }
        if let Some(k) = space.out_of_range(&values).first() {
            let (lo, hi) = space.ranges[*k];
            return Err(Error::Invalid(format!(
                "parameter {} = {} outside [{lo}, {hi}]",
                space.names[*k], values[*k]
            )));
        }
        Ok(Self { values, space })
    }
}

/// Affine map between the dataset value range and `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub min: f32,
    pub max: f32,
}

impl Normalization {
    pub fn new(min: f32, max: f32) -> Result<Self> {
        if !(min < max) || !min.is_finite() || !max.is_finite() {
            return Err(Error::Invalid(format!("degenerate dataset range [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }

    pub fn range(&self) -> f32 {
        self.max - self.min
    }

    pub fn normalize(&self, v: f32) -> f32 {
        ((v as f64 - self.min as f64) / (self.max as f64 - self.min as f64) * 2.0 - 1.0) as f32
    }

    pub fn denormalize(&self, v: f32) -> f32 {
        ((v as f64 + 1.0) * 0.5 * (self.max as f64 - self.min as f64) + self.min as f64) as f32
    }
}

/// Dense scalar field on a regular `[w0, h0, l0]` grid, stored with the last
/// axis fastest: index `(x·h0 + y)·l0 + z`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub extents: [usize; 3],
    pub values: Vec<f32>,
    /// Dataset-wide value range this volume belongs to.
    pub range: Normalization,
    /// True when `values` are mapped to `[-1, 1]` through `range`.
    pub normalized: bool,
    pub params: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VolumeHeader {
    extents: [usize; 3],
    min: f32,
    max: f32,
    normalized: bool,
    params: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

impl Volume {
    pub fn new(extents: [usize; 3], values: Vec<f32>, range: Normalization) -> Result<Self> {
        if extents.iter().any(|&e| e == 0) {
            return Err(Error::Invalid(format!("volume extents must be positive, got {extents:?}")));
        }
        if values.len() != extents.iter().product::<usize>() {
            return Err(Error::Shape(format!("volume {extents:?} given {} values", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("volume contains non-finite values".into()));
        }
        Ok(Self { extents, values, range, normalized: false, params: None })
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.extents[1] + y) * self.extents[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[self.index(x, y, z)]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value_bounds(&self) -> (f32, f32) {
        self.values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Data-space value mapped to `[-1, 1]` with `norm`.
    pub fn normalize(&self, norm: Normalization) -> Result<Volume> {
        if self.normalized {
            return Err(Error::Invalid("volume is already normalized".into()));
        }
        Normalization::new(norm.min, norm.max)?;
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = norm.normalize(*v));
        out.range = norm;
        out.normalized = true;
        Ok(out)
    }

    pub fn denormalize(&self) -> Volume {
        let mut out = self.clone();
        if self.normalized {
            out.values.iter_mut().for_each(|v| *v = self.range.denormalize(*v));
            out.normalized = false;
        }
        out
    }

    /// Writes `<base>.json` and `<base>.raw`.
    pub fn save(&self, base: &Path, config_hash: Option<&str>) -> Result<()> {
        let header = VolumeHeader {
            extents: self.extents,
            min: self.range.min,
            max: self.range.max,
            normalized: self.normalized,
            params: self.params.clone(),
            config_hash: config_hash.map(String::from),
        };
        write_json(&base.with_extension("json"), &header)?;
        write_raw_f32(&base.with_extension("raw"), &self.values)
    }

    pub fn load(base: &Path) -> Result<Volume> {
        let header: VolumeHeader = read_json(&base.with_extension("json"))?;
        let values = read_raw_f32(&base.with_extension("raw"))?;
        let range = Normalization { min: header.min, max: header.max };
        let mut v = Volume::new(header.extents, values, range)?;
        v.normalized = header.normalized;
        v.params = header.params;
        Ok(v)
    }
}

fn gauss(x: [f64; 3], c: [f64; 3], sigma: f64) -> f64 {
    let d2: f64 = x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// The synthetic field at normalized position `x ∈ [0,1]³`.
pub fn synthetic_field(x: [f64; 3], p: &[f64]) -> f64 {
    let (amp, sep, width) = (p[0], p[1], p[2]);
    let c1 = [0.5 + 0.25 * sep, 0.5, 0.5];
    let c2 = [0.5 - 0.25 * sep, 0.35, 0.6];
    amp * gauss(x, c1, 0.15)
        + 0.5 * gauss(x, c2, 0.1 * (1.0 + width))
        + 0.05 * (8.0 * PI * x[0]).sin() * (8.0 * PI * x[1]).sin()
}

/// Evaluates the synthetic field at cell centres. The volume's range is its
/// own value range until an ensemble assigns the dataset-wide one.
pub fn simulate(params: &SimParams, extents: [usize; 3]) -> Result<Volume> {
    if params.values.len() < 3 {
        return Err(Error::Invalid("the synthetic field needs at least three parameters".into()));
    }
    if let Some(k) = params.space.out_of_range(&params.values).first() {
        return Err(Error::Invalid(format!("parameter {} out of range", params.space.names[*k])));
    }
    let [w, h, l] = extents;
    if w * h * l == 0 {
        return Err(Error::Invalid("volume extents must be positive".into()));
    }
    let values: Vec<f32> = (0..w * h * l)
        .into_par_iter()
        .map(|i| {
            let (x, y, z) = (i / (h * l), (i / l) % h, i % l);
            let pos = [(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64, (z as f64 + 0.5) / l as f64];
            synthetic_field(pos, &params.values) as f32
        })
        .collect();
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let range = Normalization { min: lo, max: if hi > lo { hi } else { lo + 1.0 } };
    let mut v = Volume::new(extents, values, range)?;
    v.params = Some(params.values.clone());
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    RaeTrain,
    PredictorTrain,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub name: String,
    pub params: Vec<f64>,
    /// Volume base path relative to the manifest directory.
    pub volume: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleSettings {
    pub members: usize,
    pub extents: [usize; 3],
    pub seed: u64,
    pub test_fraction: f64,
    pub rae_fraction: f64,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        Self { members: 20, extents: [64, 64, 64], seed: 7, test_fraction: 0.2, rae_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub space: ParamSpace,
    pub extents: [usize; 3],
    pub normalization: Normalization,
    pub seed: u64,
    pub members: Vec<Member>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

/// Split sizes `(test, rae_train, predictor_train)` for `n` members.
pub fn split_sizes(n: usize, test_fraction: f64, rae_fraction: f64) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(Error::Invalid(format!("an ensemble needs at least 3 members, got {n}")));
    }
    let test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 2);
    let train = n - test;
    let rae = ((train as f64 * rae_fraction).ceil() as usize).clamp(1, train - 1);
    Ok((test, rae, train - rae))
}

impl EnsembleManifest {
    pub fn members_in(&self, split: Split) -> impl Iterator<Item = &Member> {
        self.members.iter().filter(move |m| m.split == split)
    }

    /// Members available to fit interpolation baselines: every non-test member.
    pub fn training_members(&self) -> impl Iterator<Item = &Member> {
        self.members.iter().filter(|m| m.split != Split::Test)
    }

    pub fn volume_base(&self, dir: &Path, member: &Member) -> PathBuf {
        dir.join(&member.volume)
    }

    /// Loads a member volume in data space with the dataset-wide range.
    pub fn load_volume(&self, dir: &Path, member: &Member) -> Result<Volume> {
        let mut v = Volume::load(&self.volume_base(dir, member))?;
        v.range = self.normalization;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Samples `settings.members` parameter settings uniformly, simulates and
/// writes each member under `dir/volumes/`, and assigns splits.
pub fn build_ensemble(
    dir: &Path,
    space: &ParamSpace,
    settings: &EnsembleSettings,
    config_hash: Option<&str>,
) -> Result<EnsembleManifest> {
    space.validate()?;
    let (n_test, n_rae, _) = split_sizes(settings.members, settings.test_fraction, settings.rae_fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let params: Vec<Vec<f64>> = (0..settings.members).map(|_| space.sample(&mut rng)).collect();
    let mut order: Vec<usize> = (0..settings.members).collect();
    order.shuffle(&mut rng);
    let mut splits = vec![Split::PredictorTrain; settings.members];
    for (rank, &m) in order.iter().enumerate() {
        if rank < n_test {
            splits[m] = Split::Test;
        } else if rank < n_test + n_rae {
            splits[m] = Split::RaeTrain;
        }
    }

    let vol_dir = dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let bounds: Vec<(f32, f32)> = params
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let sp = SimParams::new(space.clone(), p.clone())?;
            let v = simulate(&sp, settings.extents)?;
            v.save(&vol_dir.join(format!("member_{k:03}")), config_hash)?;
            Ok(v.value_bounds())
        })
        .collect::<Result<_>>()?;
    let (lo, hi) = bounds.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), (l, h)| (a.min(*l), b.max(*h)));

    let members = params
        .into_iter()
        .enumerate()
        .map(|(k, p)| Member {
            name: format!("member_{k:03}"),
            params: p,
            volume: format!("volumes/member_{k:03}"),
            split: splits[k],
        })
        .collect();
    Ok(EnsembleManifest {
        space: space.clone(),
        extents: settings.extents,
        normalization: Normalization::new(lo, hi)?,
        seed: settings.seed,
        members,
        config_hash: config_hash.map(String::from),
    })
}
