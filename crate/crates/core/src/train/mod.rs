//! Two-stage training: view synthesis, then stylization with a frozen encoder.

pub mod losses;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::model::layers::apply_buffer_updates;
use crate::model::{encode, extract_style_features, stylize, Binder, Mode, Model, ModelConfig};
use crate::render::{render_view, PreparedScene, SplatPlan};
use crate::synth::{sample_view, style_bank, PoseRange, SyntheticScene};
use crate::tensor::{
    adam_step, read_archive_file, write_archive_file, AdamConfig, AdamState, Archive, Tape, Tensor, Var,
};
use losses::{
    consistency_loss, feature_loss, global_style_loss, local_style_loss, local_style_target, rgb_loss, StyleStats,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rgb: f32,
    pub feat: f32,
    pub cns: f32,
    pub global: f32,
    pub local: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 1.0,
            feat: 1.0,
            cns: 1.0,
            global: 1.0,
            local: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub views: usize,
    pub lr: f32,
    pub poses: PoseRange,
    pub weights: LossWeights,
    pub seed: u64,
    /// Procedural styles generated for stage 2.
    pub styles: usize,
    pub style_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 2,
            views: 2,
            lr: 1e-4,
            poses: PoseRange::default(),
            weights: LossWeights::default(),
            seed: 0,
            styles: 12,
            style_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.views == 0 || self.styles == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch size, views, styles and learning rate must be positive".into()));
        }
        if self.poses.translation < 0.0 || self.poses.rotation_deg < 0.0 {
            return Err(Error::Config("pose ranges must be non-negative".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    ViewSynthesis = 1,
    Stylization = 2,
}

/// One row of the loss log; unused terms are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f32,
    pub rgb: f32,
    pub feat: f32,
    pub cns: f32,
    pub global: f32,
    pub local: f32,
}

pub fn write_loss_log(path: impl AsRef<Path>, records: &[LossRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        kind: "loss log",
        detail: format!("{}: {e}", path.display()),
    }
}

/// A synthetic scene with its cloud geometry prepared for the encoder.
#[derive(Clone, Debug)]
pub struct TrainScene {
    pub scene: SyntheticScene,
    pub prepared: PreparedScene,
}

impl TrainScene {
    pub fn new(scene: SyntheticScene, config: &ModelConfig) -> Result<Self> {
        let prepared = PreparedScene::new(scene.point_cloud()?, &config.encoder)?;
        Ok(Self { scene, prepared })
    }
}

/// Deterministic stream for one iteration of one stage.
pub fn iteration_rng(seed: u64, stage: Stage, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 48) | iteration as u64);
    rng
}

/// Model, optimiser state and progress; everything needed to resume bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub stage: Stage,
    pub iteration: usize,
}

const ADAM_M: &str = "adam/m/";
const ADAM_V: &str = "adam/v/";
const META_STEP: &str = "meta/adam_step";
const META_ITER: &str = "meta/iteration";
const META_STAGE: &str = "meta/stage";

fn scalar(v: u64) -> Tensor {
    // Two 24-bit halves keep counters exact in f32.
    Tensor::new(&[2], vec![(v >> 24) as f32, (v & 0xff_ffff) as f32]).expect("shape")
}

fn unscalar(t: &Tensor) -> Result<u64> {
    match t.data() {
        [hi, lo] => Ok(((*hi as u64) << 24) | *lo as u64),
        _ => Err(Error::Format {
            kind: "checkpoint",
            detail: "counter entries must hold two values".into(),
        }),
    }
}

impl Trainer {
    pub fn new(model: Model, stage: Stage) -> Self {
        Self {
            model,
            adam: AdamState::default(),
            stage,
            iteration: 0,
        }
    }

    /// Continues from a finished stage-1 model with a fresh optimiser.
    pub fn stage2_from(stage1: &Trainer) -> Result<Self> {
        if stage1.stage != Stage::ViewSynthesis {
            return Err(Error::MissingStage1);
        }
        Ok(Self::new(stage1.model.clone(), Stage::Stylization))
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = self.model.to_archive();
        for (k, v) in &self.adam.m {
            a.insert(format!("{ADAM_M}{k}"), Tensor::new(&[v.len()], v.clone()).expect("shape"));
        }
        for (k, v) in &self.adam.v {
            a.insert(format!("{ADAM_V}{k}"), Tensor::new(&[v.len()], v.clone()).expect("shape"));
        }
        a.insert(META_STEP.into(), scalar(self.adam.step));
        a.insert(META_ITER.into(), scalar(self.iteration as u64));
        a.insert(META_STAGE.into(), scalar(self.stage as u64));
        a
    }

    pub fn from_archive(config: ModelConfig, archive: &Archive) -> Result<Self> {
        let model = Model::from_archive(config, archive)?;
        let meta = |k: &str| {
            archive
                .get(k)
                .ok_or_else(|| Error::MissingParameter(k.into()))
                .and_then(unscalar)
        };
        let stage = match meta(META_STAGE)? {
            1 => Stage::ViewSynthesis,
            2 => Stage::Stylization,
            s => {
                return Err(Error::Format {
                    kind: "checkpoint",
                    detail: format!("unknown stage {s}"),
                })
            }
        };
        let mut adam = AdamState {
            step: meta(META_STEP)?,
            ..AdamState::default()
        };
        for (k, t) in archive {
            if let Some(name) = k.strip_prefix(ADAM_M) {
                adam.m.insert(name.into(), t.data().to_vec());
            } else if let Some(name) = k.strip_prefix(ADAM_V) {
                adam.v.insert(name.into(), t.data().to_vec());
            }
        }
        Ok(Self {
            model,
            adam,
            stage,
            iteration: meta(META_ITER)? as usize,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_archive_file(path, &self.to_archive())
    }

    pub fn load(config: ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(config, &read_archive_file(path)?)
    }

    fn apply(&mut self, tape: &mut Tape, loss: Var, cfg: &TrainConfig, record: LossRecord) -> Result<LossRecord> {
        let diverged = |detail: String| Error::Diverged {
            iteration: self.iteration,
            detail,
        };
        if !record.total.is_finite() {
            return Err(diverged(format!("non-finite loss {record:?}")));
        }
        let grads = tape.backward(loss)?;
        let updates = tape.take_buffer_updates();
        adam_step(&mut self.model.params, &grads.by_param(), &mut self.adam, &cfg.adam()).map_err(|e| match e {
            Error::NonFiniteGradient(name) => diverged(format!("non-finite gradient for {name}")),
            other => other,
        })?;
        apply_buffer_updates(&mut self.model.params, updates)?;
        self.iteration += 1;
        Ok(record)
    }

    /// One stage-1 iteration over a random batch of scenes and views.
    pub fn step_view_synthesis(&mut self, scenes: &[TrainScene], cfg: &TrainConfig) -> Result<LossRecord> {
        let mut rng = iteration_rng(cfg.seed, Stage::ViewSynthesis, self.iteration);
        let model = &self.model;
        let p = Binder::new(&model.params);
        let mut tape = Tape::new();
        let mut elements = Vec::with_capacity(cfg.batch_size);
        let mut rec = LossRecord {
            iteration: self.iteration,
            ..LossRecord::default()
        };
        let inv_v = 1.0 / cfg.views as f32;
        for _ in 0..cfg.batch_size {
            let s = &scenes[rng.random_range(0..scenes.len())];
            let input = tape.constant(s.prepared.input.clone());
            let fc = encode(&mut tape, &p, &model.config.encoder, &s.prepared.geometry, input, Mode::Train)?;
            let mut images = Vec::new();
            let mut plans = Vec::new();
            let mut terms = Vec::new();
            for _ in 0..cfg.views {
                let cam = sample_view(&s.scene.canonical, &cfg.poses, &mut rng)?;
                let (gt, _) = s.scene.render(&cam)?;
                let view = render_view(&mut tape, &p, &s.prepared, fc, &cam)?;
                let l_rgb = rgb_loss(&mut tape, view.image, &gt.to_tensor())?;
                let gt_levels = model.pyramid.image_features(&gt)?;
                let l_feat = feature_loss(&mut tape, &model.pyramid, view.image, &gt_levels)?;
                rec.rgb += tape.value(l_rgb).item() * inv_v;
                rec.feat += tape.value(l_feat).item() * inv_v;
                terms.push(tape.scale(l_rgb, cfg.weights.rgb * inv_v));
                terms.push(tape.scale(l_feat, cfg.weights.feat * inv_v));
                images.push(view.image);
                plans.push(view.plan);
            }
            if cfg.views >= 2 {
                let plan_refs: Vec<&SplatPlan> = plans.iter().collect();
                let c = consistency_loss(&mut tape, &images, &plan_refs)?;
                rec.cns += tape.value(c.loss).item();
                terms.push(tape.scale(c.loss, cfg.weights.cns));
            }
            elements.push(sum_vars(&mut tape, &terms)?);
        }
        let total = sum_vars(&mut tape, &elements)?;
        let loss = tape.scale(total, 1.0 / cfg.batch_size as f32);
        rec.total = tape.value(loss).item();
        let b = cfg.batch_size as f32;
        rec.rgb /= b;
        rec.feat /= b;
        rec.cns /= b;
        self.apply(&mut tape, loss, cfg, rec)
    }

    /// One stage-2 iteration; the encoder is frozen through the cached content features.
    pub fn step_stylization(&mut self, data: &StylizationData, cfg: &TrainConfig) -> Result<LossRecord> {
        let mut rng = iteration_rng(cfg.seed, Stage::Stylization, self.iteration);
        let model = &self.model;
        let frozen = ["encoder."];
        let p = Binder::with_frozen(&model.params, &frozen);
        let mut tape = Tape::new();
        let mut elements = Vec::with_capacity(cfg.batch_size);
        let mut rec = LossRecord {
            iteration: self.iteration,
            ..LossRecord::default()
        };
        let inv_v = 1.0 / cfg.views as f32;
        for _ in 0..cfg.batch_size {
            let si = rng.random_range(0..data.scenes.len());
            let (s, fc) = (&data.scenes[si], &data.content[si]);
            let style = &data.styles[rng.random_range(0..data.styles.len())];
            let fc = tape.constant(fc.clone());
            let fs = tape.constant(style.rows.clone());
            let st = stylize(&mut tape, &p, fc, fs)?;
            let mut images = Vec::new();
            let mut plans = Vec::new();
            let mut terms = Vec::new();
            for _ in 0..cfg.views {
                let cam = sample_view(&s.scene.canonical, &cfg.poses, &mut rng)?;
                let (gt, _) = s.scene.render(&cam)?;
                let view = render_view(&mut tape, &p, &s.prepared, st.features, &cam)?;
                let levels = model.pyramid.features(&mut tape, view.image)?;
                let l_global = global_style_loss(&mut tape, &levels, &style.stats)?;
                let target = local_style_target(&model.pyramid, &gt, &style.rows)?;
                let l_local = local_style_loss(&mut tape, *levels.last().expect("levels"), &target)?;
                rec.global += tape.value(l_global).item() * inv_v;
                rec.local += tape.value(l_local).item() * inv_v;
                terms.push(tape.scale(l_global, cfg.weights.global * inv_v));
                terms.push(tape.scale(l_local, cfg.weights.local * inv_v));
                images.push(view.image);
                plans.push(view.plan);
            }
            if cfg.views >= 2 && cfg.weights.cns != 0.0 {
                let plan_refs: Vec<&SplatPlan> = plans.iter().collect();
                let c = consistency_loss(&mut tape, &images, &plan_refs)?;
                rec.cns += tape.value(c.loss).item();
                terms.push(tape.scale(c.loss, cfg.weights.cns));
            }
            elements.push(sum_vars(&mut tape, &terms)?);
        }
        let total = sum_vars(&mut tape, &elements)?;
        let loss = tape.scale(total, 1.0 / cfg.batch_size as f32);
        rec.total = tape.value(loss).item();
        let b = cfg.batch_size as f32;
        rec.global /= b;
        rec.local /= b;
        rec.cns /= b;
        self.apply(&mut tape, loss, cfg, rec)
    }
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut it = vars.iter().copied();
    let first = it.next().ok_or_else(|| Error::InvalidArgument("nothing to sum".into()))?;
    it.try_fold(first, |acc, v| tape.add(acc, v))
}

/// A style image with its grid features and pyramid statistics.
#[derive(Clone, Debug)]
pub struct PreparedStyle {
    pub image: RgbImage,
    pub rows: Tensor,
    pub stats: StyleStats,
}

impl PreparedStyle {
    pub fn new(model: &Model, image: RgbImage) -> Result<Self> {
        let rows = extract_style_features(&model.pyramid, &image)?.features;
        let stats = StyleStats::new(&model.pyramid, &image)?;
        Ok(Self { image, rows, stats })
    }
}

/// Content features of the frozen encoder for `scene`.
pub fn content_features(model: &Model, scene: &PreparedScene) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = Binder::new(&model.params);
    let input = tape.constant(scene.input.clone());
    let fc = encode(&mut tape, &p, &model.config.encoder, &scene.geometry, input, Mode::Eval)?;
    Ok(tape.value(fc).clone())
}

/// Scenes, their frozen content features and the style bank for stage 2.
pub struct StylizationData<'a> {
    pub scenes: &'a [TrainScene],
    pub content: Vec<Tensor>,
    pub styles: Vec<PreparedStyle>,
}

impl<'a> StylizationData<'a> {
    pub fn new(model: &Model, scenes: &'a [TrainScene], cfg: &TrainConfig) -> Result<Self> {
        let content = scenes
            .iter()
            .map(|s| content_features(model, &s.prepared))
            .collect::<Result<_>>()?;
        let styles = style_bank(cfg.styles, cfg.seed ^ 0x5717_1e00, cfg.style_size)?
            .into_iter()
            .map(|img| PreparedStyle::new(model, img))
            .collect::<Result<_>>()?;
        Ok(Self { scenes, content, styles })
    }
}

/// Runs stage 1 from the trainer's current iteration up to `cfg.iterations`.
pub fn train_stage1(
    trainer: &mut Trainer,
    scenes: &[TrainScene],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if trainer.stage != Stage::ViewSynthesis {
        return Err(Error::InvalidArgument("trainer is not in the view-synthesis stage".into()));
    }
    let mut log = Vec::new();
    while trainer.iteration < cfg.iterations {
        let rec = trainer.step_view_synthesis(scenes, cfg)?;
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

/// Runs stage 2 from the trainer's current iteration up to `cfg.iterations`.
pub fn train_stage2(
    trainer: &mut Trainer,
    scenes: &[TrainScene],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if trainer.stage != Stage::Stylization {
        return Err(Error::MissingStage1);
    }
    let data = StylizationData::new(&trainer.model, scenes, cfg)?;
    let mut log = Vec::new();
    while trainer.iteration < cfg.iterations {
        let rec = trainer.step_stylization(&data, cfg)?;
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}
