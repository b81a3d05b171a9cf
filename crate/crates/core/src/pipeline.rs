//! Run-directory pipeline: configuration, staged artifacts and the
//! operations behind the command-line tool and the HTTP service.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{idw, RbfModel};
use crate::composite::{unit, FusedViews, SensitivityCurve, Surrogate};
use crate::ensemble::{build_ensemble, EnsembleManifest, EnsembleSettings, ParamSpace, Split, Volume};
use crate::error::{Error, Result};
use crate::io::{read_json, short_digest, write_json};
use crate::metrics::MetricsReport;
use crate::predictor::{train_predictor, PredictorCheckpoint, PredictorConfig, PredictorLayout};
use crate::rae::{collect_rays, train_rae, RaeCheckpoint, RaeConfig, RayLatentField};
use crate::render::{render, Camera, ImageRgb, RenderSettings, TransferFunction};
use crate::view::{sample_view, Axis, ViewConfig};

pub const RUN_DIR_ENV: &str = "VDLS_RUN_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewSize {
    pub width: usize,
    pub height: usize,
}

impl Default for ViewSize {
    fn default() -> Self {
        Self { width: 32, height: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub fov_deg: f64,
    pub distance: f64,
    pub step: Option<f64>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { width: 128, height: 128, fov_deg: 45.0, distance: 2.5, step: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub viewpoint: [f64; 3],
    pub idw_g: Vec<usize>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { viewpoint: [1.0, 1.0, 1.0], idw_g: vec![1, 2, 3, 4, 5] }
    }
}

/// Everything a run depends on. Defaults describe the desk-scale setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub ensemble: EnsembleSettings,
    pub view: ViewSize,
    pub rae: RaeConfig,
    pub predictor: PredictorConfig,
    pub render: RenderConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ensemble: EnsembleSettings::default(),
            view: ViewSize::default(),
            rae: RaeConfig {
                k_r: 8,
                lr: 2e-3,
                lr_final_fraction: 0.1,
                batch_size: 256,
                epochs: 300,
                eps_h: 0.1,
                ..RaeConfig::default()
            },
            predictor: PredictorConfig { k_v: 4, a: 3, b: 1, lr: 1e-3, lr_final_fraction: 0.1, epochs: 100, input_noise: 0.0, ..PredictorConfig::default() },
            render: RenderConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

fn field_error(field: &str, e: Error) -> Error {
    match e {
        Error::Invalid(m) | Error::Shape(m) => Error::Invalid(format!("{field}: {m}")),
        other => other,
    }
}

impl PipelineConfig {
    /// Tiny configuration that trains in seconds; for smoke tests only.
    pub fn smoke() -> Self {
        Self {
            ensemble: EnsembleSettings { members: 6, extents: [16, 16, 16], seed: 3, ..EnsembleSettings::default() },
            view: ViewSize { width: 8, height: 8 },
            rae: RaeConfig { k_r: 2, t: 2, n_r: 2, lr: 1e-3, batch_size: 64, epochs: 2, ..RaeConfig::default() },
            predictor: PredictorConfig { k_v: 1, a: 1, b: 1, lr: 1e-3, lr_final_fraction: 1.0, epochs: 2, input_noise: 0.0, ..PredictorConfig::default() },
            render: RenderConfig { width: 24, height: 20, ..RenderConfig::default() },
            evaluate: EvaluateConfig::default(),
        }
    }

    pub fn views(&self) -> Result<[ViewConfig; 3]> {
        let v: Vec<ViewConfig> = Axis::ALL
            .iter()
            .map(|&a| ViewConfig::for_volume(a, self.ensemble.extents, self.view.width, self.view.height))
            .collect::<Result<_>>()
            .map_err(|e| field_error("view", e))?;
        Ok(v.try_into().expect("three axes"))
    }

    /// Checks every cross-field constraint, naming the offending section.
    pub fn validate(&self) -> Result<()> {
        let e = &self.ensemble;
        if e.extents.contains(&0) {
            return Err(Error::Invalid("ensemble.extents: every extent must be positive".into()));
        }
        crate::ensemble::split_sizes(e.members, e.test_fraction, e.rae_fraction).map_err(|x| field_error("ensemble.members", x))?;
        for (name, f) in [("ensemble.test_fraction", e.test_fraction), ("ensemble.rae_fraction", e.rae_fraction)] {
            if !(0.0..1.0).contains(&f) {
                return Err(Error::Invalid(format!("{name}: {f} outside [0, 1)")));
            }
        }
        for v in self.views()? {
            self.rae.validate(v.ray_len).map_err(|x| field_error("rae", x))?;
            let ls = v.ray_len / self.rae.reduction();
            PredictorLayout::new(&self.predictor, v.width, v.height, ls, self.rae.t).map_err(|x| field_error("predictor", x))?;
        }
        let p = &self.predictor;
        if !(p.input_noise >= 0.0) || !(p.input_group_l1 >= 0.0) {
            return Err(Error::Invalid("predictor.input_noise, predictor.input_group_l1: must be non-negative".into()));
        }
        if self.render.width == 0 || self.render.height == 0 {
            return Err(Error::Invalid("render: image extents must be positive".into()));
        }
        if !(self.render.fov_deg > 0.0 && self.render.fov_deg < 180.0) {
            return Err(Error::Invalid(format!("render.fov_deg: {} outside (0, 180)", self.render.fov_deg)));
        }
        if !(self.render.distance > 0.0) {
            return Err(Error::Invalid("render.distance: must be positive".into()));
        }
        unit(self.evaluate.viewpoint).map_err(|x| field_error("evaluate.viewpoint", x))?;
        if let Some(g) = self.evaluate.idw_g.iter().find(|&&g| g == 0) {
            return Err(Error::Invalid(format!("evaluate.idw_g: {g} must be positive")));
        }
        Ok(())
    }

    /// Applies a `section.field=value` override, with `value` parsed as JSON
    /// and falling back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("override `{assignment}` must look like section.field=value")))?;
        let value: serde_json::Value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.into()));
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .get_mut(part)
                .ok_or_else(|| Error::Invalid(format!("override `{key}`: unknown field `{part}`")))?;
        }
        *node = value;
        *self = serde_json::from_value(tree).map_err(|e| Error::Invalid(format!("override `{key}`: {e}")))?;
        Ok(())
    }

    fn digest_of<T: Serialize>(parts: &[&T]) -> String {
        let text: Vec<String> = parts.iter().map(|p| serde_json::to_string(p).expect("config serializes")).collect();
        short_digest(text.join("\n").as_bytes())
    }

    /// Hash of the configuration sections that determine `stage`'s outputs.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let ens = Self::digest_of(&[&self.ensemble]);
        match stage {
            Stage::Ensemble => ens,
            Stage::Rae => Self::digest_of(&[&ens, &serde_json::to_string(&(&self.view, &self.rae)).unwrap()]),
            Stage::Latents => Self::digest_of(&[&"latents".to_string(), &self.stage_hash(Stage::Rae)]),
            Stage::Predictor => {
                Self::digest_of(&[&self.stage_hash(Stage::Latents), &serde_json::to_string(&self.predictor).unwrap()])
            }
        }
    }
}

/// Training stages, in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ensemble,
    Rae,
    Latents,
    Predictor,
}

impl Stage {
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Ensemble => "ensemble",
            Stage::Rae => "rae",
            Stage::Latents => "latents",
            Stage::Predictor => "predictor",
        }
    }

    pub fn command(self) -> &'static str {
        match self {
            Stage::Ensemble => "gen-ensemble",
            Stage::Rae => "train-rae",
            Stage::Latents => "encode-latents",
            Stage::Predictor => "train-predictor",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub config_hash: String,
    pub seconds: f64,
    pub details: serde_json::Value,
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::X => "axis_x",
        Axis::Y => "axis_y",
        Axis::Z => "axis_z",
    }
}

/// Reconstruction quality of one axis autoencoder on held-out rays.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RaeReport {
    pub axis: Axis,
    pub id: String,
    pub final_loss: f64,
    pub test_psnr: f64,
    pub diverged: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictorReport {
    pub axis: Axis,
    pub id: String,
    pub rae_id: String,
    pub final_loss: f64,
    pub diverged: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub rae_ids: Vec<String>,
    pub predictor_ids: Vec<String>,
    pub out_of_range: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InferOutput {
    pub handle: String,
    pub path: PathBuf,
    pub extents: [usize; 3],
    pub value_min: f32,
    pub value_max: f32,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MemberEvaluation {
    pub name: String,
    pub params: Vec<f64>,
    pub methods: Vec<MethodMetrics>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_hash: String,
    pub viewpoint: [f64; 3],
    pub rbf_width: f64,
    pub members: Vec<MemberEvaluation>,
    /// Mean PSNR per method over members with finite PSNR.
    pub mean_psnr: Vec<(String, f64)>,
}

/// A run directory bound to one configuration.
#[derive(Clone, Debug)]
pub struct Run {
    pub root: PathBuf,
    pub config: PipelineConfig,
    /// Regenerate stages even when fresh, and accept stale upstream artifacts.
    pub force: bool,
}

impl Run {
    pub fn new(root: impl Into<PathBuf>, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { root: root.into(), config, force: false })
    }

    /// Uses the configuration recorded in `root` when present, defaults otherwise.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join("config.json");
        let config = if path.exists() { read_json(&path)? } else { PipelineConfig::default() };
        Self::new(root, config)
    }

    pub fn save_config(&self) -> Result<()> {
        write_json(&self.root.join("config.json"), &self.config)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("ensemble").join("manifest.json")
    }

    pub fn rae_base(&self, axis: Axis) -> PathBuf {
        self.root.join("rae").join(axis_name(axis))
    }

    pub fn latent_base(&self, axis: Axis, member: &str) -> PathBuf {
        self.root.join("latents").join(axis_name(axis)).join(member)
    }

    pub fn predictor_base(&self, axis: Axis) -> PathBuf {
        self.root.join("predictor").join(axis_name(axis))
    }

    fn summary_path(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir()).join("summary.json")
    }

    pub fn summary(&self, stage: Stage) -> Result<Option<StageSummary>> {
        let p = self.summary_path(stage);
        if p.exists() {
            read_json(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    /// True when `stage` already holds outputs for the current configuration.
    pub fn is_fresh(&self, stage: Stage) -> Result<bool> {
        Ok(self.summary(stage)?.is_some_and(|s| s.config_hash == self.config.stage_hash(stage)))
    }

    /// Fails unless `stage` has completed for the current configuration.
    pub fn require(&self, stage: Stage) -> Result<()> {
        match self.summary(stage)? {
            None => Err(Error::Missing { path: self.summary_path(stage), command: stage.command() }),
            Some(s) if s.config_hash != self.config.stage_hash(stage) && !self.force => Err(Error::Mismatch(format!(
                "{} outputs were produced by configuration {}, current is {}; rerun `vdls {}` or pass --force",
                stage.dir(),
                s.config_hash,
                self.config.stage_hash(stage),
                stage.command()
            ))),
            Some(_) => Ok(()),
        }
    }

    fn needs_run(&self, stage: Stage) -> Result<bool> {
        Ok(self.force || !self.is_fresh(stage)?)
    }

    fn finish(&self, stage: Stage, start: Instant, details: impl Serialize) -> Result<StageSummary> {
        let s = StageSummary {
            stage: stage.dir().into(),
            config_hash: self.config.stage_hash(stage),
            seconds: start.elapsed().as_secs_f64(),
            details: serde_json::to_value(details).map_err(|e| Error::Format(e.to_string()))?,
        };
        write_json(&self.summary_path(stage), &s)?;
        Ok(s)
    }

    fn require_file(path: &Path, stage: Stage) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::Missing { path: path.to_path_buf(), command: stage.command() })
        }
    }

    pub fn manifest(&self) -> Result<EnsembleManifest> {
        Self::require_file(&self.manifest_path(), Stage::Ensemble)?;
        EnsembleManifest::load(&self.manifest_path())
    }

    fn ensemble_dir(&self) -> PathBuf {
        self.root.join("ensemble")
    }

    pub fn gen_ensemble(&self) -> Result<StageSummary> {
        if !self.needs_run(Stage::Ensemble)? {
            return Ok(self.summary(Stage::Ensemble)?.unwrap());
        }
        let start = Instant::now();
        self.save_config()?;
        let hash = self.config.stage_hash(Stage::Ensemble);
        let m = build_ensemble(&self.ensemble_dir(), &ParamSpace::synthetic(), &self.config.ensemble, Some(&hash))?;
        m.save(&self.manifest_path())?;
        let count = |s| m.members_in(s).count();
        self.finish(
            Stage::Ensemble,
            start,
            serde_json::json!({
                "members": m.members.len(),
                "rae_train": count(Split::RaeTrain),
                "predictor_train": count(Split::PredictorTrain),
                "test": count(Split::Test),
                "normalization": m.normalization,
            }),
        )
    }

    pub fn train_rae(&self) -> Result<StageSummary> {
        self.require(Stage::Ensemble)?;
        if !self.needs_run(Stage::Rae)? {
            return Ok(self.summary(Stage::Rae)?.unwrap());
        }
        let start = Instant::now();
        self.save_config()?;
        let m = self.manifest()?;
        let dir = self.ensemble_dir();
        let hash = self.config.stage_hash(Stage::Rae);
        let mut reports = Vec::new();
        for view in self.config.views()? {
            let rays = collect_rays(&m, &dir, m.members_in(Split::RaeTrain), &view)?;
            tracing::info!(axis = ?view.axis, rays = rays.shape()[0], "training autoencoder");
            let tr = train_rae(&self.config.rae, &rays)?;
            let ck = RaeCheckpoint {
                model: tr.model,
                view,
                normalization: m.normalization,
                loss_curve: tr.loss_curve,
                config_hash: Some(hash.clone()),
            };
            ck.save(&self.rae_base(view.axis))?;
            let test = collect_rays(&m, &dir, m.members_in(Split::Test), &view)?;
            let rec = ck.model.reconstruct(&test)?;
            let mse = rec.data().iter().zip(test.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / test.len() as f64;
            // normalized data spans [-1, 1]
            let test_psnr = 10.0 * (4.0 / mse).log10();
            reports.push(RaeReport {
                axis: view.axis,
                id: ck.id(),
                final_loss: ck.loss_curve.last().copied().unwrap_or(f64::NAN),
                test_psnr,
                diverged: tr.diverged,
            });
        }
        self.finish(Stage::Rae, start, &reports)
    }

    pub fn rae_reports(&self) -> Result<Vec<RaeReport>> {
        self.require(Stage::Rae)?;
        let s = self.summary(Stage::Rae)?.unwrap();
        serde_json::from_value(s.details).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load_rae(&self, axis: Axis) -> Result<RaeCheckpoint> {
        let base = self.rae_base(axis);
        Self::require_file(&base.with_extension("json"), Stage::Rae)?;
        RaeCheckpoint::load(&base)
    }

    pub fn encode_latents(&self) -> Result<StageSummary> {
        self.require(Stage::Rae)?;
        if !self.needs_run(Stage::Latents)? {
            return Ok(self.summary(Stage::Latents)?.unwrap());
        }
        let start = Instant::now();
        self.save_config()?;
        let m = self.manifest()?;
        let hash = self.config.stage_hash(Stage::Latents);
        let raes: Vec<RaeCheckpoint> = Axis::ALL.iter().map(|&a| self.load_rae(a)).collect::<Result<_>>()?;
        let mut count = 0;
        for member in m.training_members() {
            let v = m.load_volume(&self.ensemble_dir(), member)?.normalize(m.normalization)?;
            for rae in &raes {
                let field = rae.encode_field(&sample_view(&v, &rae.view)?)?;
                field.save(&self.latent_base(rae.view.axis, &member.name), Some(&hash))?;
            }
            count += 1;
        }
        self.finish(Stage::Latents, start, serde_json::json!({ "members": count }))
    }

    pub fn train_predictor(&self) -> Result<StageSummary> {
        self.require(Stage::Latents)?;
        if !self.needs_run(Stage::Predictor)? {
            return Ok(self.summary(Stage::Predictor)?.unwrap());
        }
        let start = Instant::now();
        self.save_config()?;
        let m = self.manifest()?;
        let hash = self.config.stage_hash(Stage::Predictor);
        let mut reports = Vec::new();
        for axis in Axis::ALL {
            let rae = self.load_rae(axis)?;
            let samples: Vec<(Vec<f64>, RayLatentField)> = m
                .training_members()
                .map(|mem| {
                    let base = self.latent_base(axis, &mem.name);
                    Self::require_file(&base.with_extension("json"), Stage::Latents)?;
                    Ok((mem.params.clone(), RayLatentField::load(&base)?))
                })
                .collect::<Result<_>>()?;
            if samples.iter().any(|(_, f)| f.rae_id != rae.id()) {
                return Err(Error::Mismatch(format!(
                    "latents for {axis:?} were encoded by a different autoencoder; rerun `vdls encode-latents`"
                )));
            }
            tracing::info!(?axis, members = samples.len(), "training predictor");
            let tr = train_predictor(&self.config.predictor, &m.space, &rae.view, &samples)?;
            let ck = PredictorCheckpoint {
                model: tr.model,
                view: rae.view,
                rae_id: rae.id(),
                normalization: m.normalization,
                loss_curve: tr.loss_curve,
                config_hash: Some(hash.clone()),
            };
            ck.save(&self.predictor_base(axis))?;
            reports.push(PredictorReport {
                axis,
                id: ck.id(),
                rae_id: ck.rae_id.clone(),
                final_loss: ck.loss_curve.last().copied().unwrap_or(f64::NAN),
                diverged: tr.diverged,
            });
        }
        self.finish(Stage::Predictor, start, &reports)
    }

    /// Runs every training stage that is not yet fresh.
    pub fn train_all(&self) -> Result<()> {
        self.gen_ensemble()?;
        self.train_rae()?;
        self.encode_latents()?;
        self.train_predictor()?;
        Ok(())
    }

    pub fn load_surrogate(&self) -> Result<Surrogate> {
        self.require(Stage::Predictor)?;
        let axes: Vec<(PredictorCheckpoint, RaeCheckpoint)> = Axis::ALL
            .iter()
            .map(|&a| {
                let base = self.predictor_base(a);
                Self::require_file(&base.with_extension("json"), Stage::Predictor)?;
                Self::require_file(&base.with_extension("vdls"), Stage::Predictor)?;
                let p = PredictorCheckpoint::load(&base)?;
                let r = self.load_rae(a)?;
                Ok((p, r))
            })
            .collect::<Result<_>>()?;
        Surrogate::new(axes.try_into().map_err(|_| Error::Invalid("expected three axes".into()))?)
    }

    /// Centre of the parameter space.
    pub fn default_params(space: &ParamSpace) -> Vec<f64> {
        space.ranges.iter().map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn camera(&self, viewpoint: [f64; 3]) -> Result<Camera> {
        let r = &self.config.render;
        Camera::orbit(viewpoint, r.distance, r.fov_deg, r.width, r.height)
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings { step: self.config.render.step, ..RenderSettings::default() }
    }

    pub fn evaluate(&self) -> Result<EvaluationReport> {
        self.require(Stage::Predictor)?;
        let surrogate = self.load_surrogate()?;
        let m = self.manifest()?;
        let dir = self.ensemble_dir();
        let ev = &self.config.evaluate;
        let viewpoint = unit(ev.viewpoint)?;
        let range = m.normalization.range() as f64;
        let camera = self.camera(viewpoint)?;
        let tf = TransferFunction::high_opacity();
        let settings = self.render_settings();
        let train: Vec<(Vec<f64>, Volume)> =
            m.training_members().map(|mem| Ok((mem.params.clone(), m.load_volume(&dir, mem)?))).collect::<Result<_>>()?;
        let refs: Vec<(Vec<f64>, &Volume)> = train.iter().map(|(p, v)| (p.clone(), v)).collect();
        if let Some(g) = ev.idw_g.iter().find(|&&g| g > refs.len()) {
            return Err(Error::Invalid(format!("evaluate.idw_g: {g} exceeds the {} training members", refs.len())));
        }
        let rbf = RbfModel::fit(&m.space, &refs)?;
        let mut members = Vec::new();
        for mem in m.members_in(Split::Test) {
            let truth = m.load_volume(&dir, mem)?;
            let truth_img = render(&truth, &camera, &tf, &settings)?.image;
            let score = |v: &Volume| -> Result<MetricsReport> {
                let img = render(v, &camera, &tf, &settings)?.image;
                MetricsReport::compute(&truth, v, range, &truth_img, &img)
            };
            let mut methods = Vec::new();
            let fused = surrogate.fuse(&mem.params, viewpoint)?.to_grid(m.extents)?.denormalize();
            methods.push(MethodMetrics { method: "surrogate".into(), metrics: score(&fused)? });
            for &g in &ev.idw_g {
                let v = idw(&m.space, &refs, &mem.params, g)?;
                methods.push(MethodMetrics { method: format!("idw_g{g}"), metrics: score(&v)? });
            }
            let v = rbf.predict(&m.space, &refs, &mem.params)?;
            methods.push(MethodMetrics { method: "rbf".into(), metrics: score(&v)? });
            members.push(MemberEvaluation { name: mem.name.clone(), params: mem.params.clone(), methods });
        }
        let mut mean_psnr = Vec::new();
        if let Some(first) = members.first() {
            for (k, mm) in first.methods.iter().enumerate() {
                let vals: Vec<f64> = members.iter().filter_map(|e| e.methods[k].metrics.psnr).collect();
                mean_psnr.push((mm.method.clone(), vals.iter().sum::<f64>() / vals.len().max(1) as f64));
            }
        }
        let report = EvaluationReport {
            config_hash: self.config.stage_hash(Stage::Predictor),
            viewpoint,
            rbf_width: rbf.width,
            members,
            mean_psnr,
        };
        write_json(&self.root.join("evaluate").join("report.json"), &report)?;
        Ok(report)
    }
}

/// Inference and rendering against a loaded surrogate; shared by the CLI and
/// the service.
#[derive(Clone, Debug)]
pub struct Session {
    pub surrogate: Surrogate,
    pub extents: [usize; 3],
    pub run: Run,
}

impl Session {
    pub fn load(run: Run) -> Result<Self> {
        let surrogate = run.load_surrogate()?;
        let extents = run.manifest()?.extents;
        Ok(Self { surrogate, extents, run })
    }

    pub fn space(&self) -> &ParamSpace {
        self.surrogate.space()
    }

    pub fn provenance(&self, params: &[f64]) -> Provenance {
        let space = self.space();
        Provenance {
            rae_ids: self.surrogate.axes.iter().map(|(_, r)| r.id()).collect(),
            predictor_ids: self.surrogate.axes.iter().map(|(p, _)| p.id()).collect(),
            out_of_range: space.out_of_range(params).into_iter().map(|i| space.names[i].clone()).collect(),
        }
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        let dim = self.space().dim();
        if params.len() != dim {
            return Err(Error::Invalid(format!("expected {dim} parameter values, got {}", params.len())));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("parameter values must be finite".into()));
        }
        Ok(())
    }

    pub fn fuse(&self, params: &[f64], viewpoint: [f64; 3]) -> Result<FusedViews> {
        self.check_params(params)?;
        self.surrogate.fuse(params, unit(viewpoint)?)
    }

    /// Predicts the fused volume and writes it under `infer/`.
    pub fn infer(&self, params: &[f64], viewpoint: [f64; 3]) -> Result<InferOutput> {
        let fused = self.fuse(params, viewpoint)?;
        let provenance = self.provenance(params);
        let key = serde_json::to_string(&(&provenance.predictor_ids, params, fused.viewpoint)).expect("serializes");
        let handle = short_digest(key.as_bytes());
        let v = fused.to_grid(self.extents)?.denormalize();
        let path = self.run.root.join("infer").join(&handle);
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(&path, e))?;
        v.save(&path, Some(&self.run.config.stage_hash(Stage::Predictor)))?;
        let (value_min, value_max) = v.value_bounds();
        Ok(InferOutput { handle, path, extents: self.extents, value_min, value_max, provenance })
    }

    /// Predict, decode, fuse for the camera's direction and render.
    pub fn render(&self, params: &[f64], camera: &Camera, tf: &TransferFunction, settings: &RenderSettings) -> Result<ImageRgb> {
        camera.validate()?;
        let dir = [camera.eye[0] - camera.look_at[0], camera.eye[1] - camera.look_at[1], camera.eye[2] - camera.look_at[2]];
        let fused = self.fuse(params, dir)?;
        Ok(render(&fused, camera, tf, settings)?.image)
    }

    pub fn sensitivity(&self, params: &[f64], index: usize, n: usize) -> Result<SensitivityCurve> {
        self.check_params(params)?;
        self.surrogate.sensitivity(params, index, n)
    }
}
