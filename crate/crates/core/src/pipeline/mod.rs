//! End-to-end commands: scene files, training, trajectory rendering and evaluation.
//!
//! Everything the CLI and the render service do goes through here, so a frame
//! rendered by either for the same pose, style and checkpoint is byte-identical.

pub mod service;
mod session;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use session::{style_id, RenderSession, SessionInfo, StyleUpdate, MAX_FRAME_SIDE};

use crate::camera::{look_at, CameraSpec, Depth, DepthRaster, LayeredDepthRaster, ScenePointCloud, SourceView};
use crate::error::{Error, Result};
use crate::eval::{consistency_report, ConsistencyReport};
use crate::image::RgbImage;
use crate::model::{EncoderConfig, Model, ModelConfig, StageConfig};
use crate::synth::{procedural_style, PoseRange, SceneKind, StyleKind, SyntheticScene};
use crate::train::{train_stage1, train_stage2, write_loss_log, LossRecord, Stage, TrainConfig, TrainScene, Trainer};

/// Seed offset of generated training scenes; scene `i` of kind `Boxes` is `SyntheticScene::preset(i)`.
pub const TRAIN_SCENE_SEED: u64 = 0x5ce0_0000;

pub const IMAGE_FILE: &str = "image.png";
pub const DEPTH_FILE: &str = "depth.dpth";
pub const CAMERA_FILE: &str = "camera.json";
pub const SCENE_FILE: &str = "scene.json";
pub const STAGE1_CHECKPOINT: &str = "stage1.ckpt";
pub const STAGE2_CHECKPOINT: &str = "stage2.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenePaths {
    pub image: PathBuf,
    /// `DPTH` single-layer or `LDI0` layered depth, told apart by magic.
    pub depth: PathBuf,
    pub camera: PathBuf,
    /// Replaces the camera file when set.
    pub camera_override: Option<CameraSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub kind: SceneKind,
    /// Number of generated training scenes.
    pub scenes: usize,
    pub size: usize,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            kind: SceneKind::Boxes,
            scenes: 3,
            size: 64,
            stage1: TrainConfig::default(),
            stage2: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Trajectory {
    /// Camera circles the canonical centre in its image plane, looking at a
    /// point `focus` units ahead. View 0 is the canonical camera.
    Orbit { views: usize, radius: f64, focus: f64 },
    /// Explicit world→camera poses, row-major 3×4 flattened.
    Poses { poses: Vec<[f64; 12]> },
    /// The canonical camera repeated.
    Static { views: usize },
}

impl Default for Trajectory {
    fn default() -> Self {
        Trajectory::Orbit {
            views: 30,
            radius: 0.1,
            focus: 2.5,
        }
    }
}

pub fn pose_from_flat(p: &[f64; 12]) -> [[f64; 4]; 3] {
    [0, 1, 2].map(|r| [0, 1, 2, 3].map(|c| p[r * 4 + c]))
}

pub fn pose_to_flat(p: &[[f64; 4]; 3]) -> [f64; 12] {
    std::array::from_fn(|k| p[k / 4][k % 4])
}

/// Orbit camera at `angle` radians around `canonical`.
pub fn orbit_camera(canonical: &CameraSpec, radius: f64, focus: f64, angle: f64) -> Result<CameraSpec> {
    let offset = [radius * angle.sin(), 0.5 * radius * (1.0 - angle.cos()), 0.0];
    if offset == [0.0; 3] {
        return Ok(canonical.clone());
    }
    let r0t = canonical.rotation().transpose();
    let c0 = nalgebra::Vector3::from(canonical.centre());
    let eye = c0 + r0t * nalgebra::Vector3::from(offset);
    let target = c0 + r0t * nalgebra::Vector3::new(0.0, 0.0, focus);
    let up = -(r0t * nalgebra::Vector3::new(0.0, 1.0, 0.0));
    canonical.with_pose(look_at(eye.into(), target.into(), up.into())?)
}

impl Trajectory {
    pub fn cameras(&self, canonical: &CameraSpec) -> Result<Vec<CameraSpec>> {
        let cams = match self {
            Trajectory::Orbit { views, radius, focus } => (0..*views)
                .map(|k| orbit_camera(canonical, *radius, *focus, k as f64 / *views as f64 * std::f64::consts::TAU))
                .collect::<Result<Vec<_>>>()?,
            Trajectory::Poses { poses } => poses
                .iter()
                .map(|p| canonical.with_pose(pose_from_flat(p)))
                .collect::<Result<Vec<_>>>()?,
            Trajectory::Static { views } => vec![canonical.clone(); *views],
        };
        if cams.is_empty() {
            return Err(Error::Config("trajectory is empty".into()));
        }
        Ok(cams)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scene: ScenePaths,
    /// Style image; a procedural style from `seed` when absent.
    pub style: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainSchedule,
    pub trajectory: Trajectory,
    /// Poses the render service accepts, relative to the canonical camera.
    pub bounds: PoseRange,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scene: ScenePaths::default(),
            style: None,
            checkpoint: None,
            output: PathBuf::from("out"),
            seed: 0,
            model: ModelConfig::default(),
            train: TrainSchedule::default(),
            trajectory: Trajectory::default(),
            bounds: PoseRange {
                translation: 0.2,
                rotation_deg: 15.0,
            },
        }
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::Config(format!("no {what} configured")));
    }
    if !path.exists() {
        return Err(Error::Config(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML; relative paths are taken from `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.scene.image);
        fix(&mut cfg.scene.depth);
        fix(&mut cfg.scene.camera);
        fix(&mut cfg.output);
        cfg.style.iter_mut().for_each(fix);
        cfg.checkpoint.iter_mut().for_each(fix);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Replaces every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self.train.stage1.seed = seed;
        self.train.stage2.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.stage1.validate()?;
        self.train.stage2.validate()?;
        if self.bounds.translation < 0.0 || self.bounds.rotation_deg < 0.0 {
            return Err(Error::Config("pose bounds must be non-negative".into()));
        }
        Ok(())
    }

    /// Checkpoint path: the configured one, else the stage-2 file in the output directory.
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output.join(STAGE2_CHECKPOINT))
    }

    /// Loads the input view and builds the scene cloud.
    pub fn load_scene(&self) -> Result<(RgbImage, CameraSpec, ScenePointCloud)> {
        let s = &self.scene;
        require(&s.image, "scene image")?;
        require(&s.depth, "depth file")?;
        let image = RgbImage::read_png(&s.image)?;
        let depth = read_depth(&s.depth)?;
        let camera = match &s.camera_override {
            Some(c) => c.clone(),
            None => {
                require(&s.camera, "camera file")?;
                read_camera(&s.camera)?
            }
        };
        camera.validate()?;
        let cloud = crate::camera::merge_views(
            &[SourceView {
                image: image.clone(),
                depth,
                camera: camera.clone(),
            }],
            0,
        )?;
        Ok((image, camera, cloud))
    }

    pub fn load_style(&self, size: usize) -> Result<RgbImage> {
        match &self.style {
            Some(p) => {
                require(p, "style image")?;
                RgbImage::read_png(p)
            }
            None => procedural_style(StyleKind::Perlin, self.seed, size, size),
        }
    }

    pub fn load_model(&self) -> Result<Model> {
        let path = self.checkpoint_path();
        if !path.exists() {
            return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
        }
        Ok(Trainer::load(self.model.clone(), &path)?.model)
    }

    /// Session over the configured scene, checkpoint and style.
    pub fn session(&self) -> Result<RenderSession> {
        self.validate()?;
        let model = self.load_model()?;
        let (_, camera, cloud) = self.load_scene()?;
        let style = self.load_style(camera.width.max(camera.height).max(32))?;
        RenderSession::new(model, cloud, camera, self.bounds, &style)
    }
}

/// Reads `DPTH` or `LDI0` depth by magic.
pub fn read_depth(path: impl AsRef<Path>) -> Result<Depth> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match bytes.get(..4) {
        Some(m) if m == crate::camera::DEPTH_MAGIC => Ok(Depth::Single(DepthRaster::read(bytes.as_slice())?)),
        Some(m) if m == crate::camera::LDI_MAGIC => Ok(Depth::Layered(LayeredDepthRaster::read(bytes.as_slice())?)),
        _ => Err(Error::Format {
            kind: "depth",
            detail: format!("{}: unrecognised magic", path.display()),
        }),
    }
}

pub fn read_camera(path: impl AsRef<Path>) -> Result<CameraSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        kind: "camera",
        detail: format!("{}: {e}", path.display()),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the canonical view of a generated scene: image, depth, camera and the scene description.
pub fn make_scene(kind: SceneKind, seed: u64, size: usize, dir: impl AsRef<Path>) -> Result<ScenePaths> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let scene = SyntheticScene::generate(kind, seed, size, size)?;
    let (image, depth) = scene.render(&scene.canonical)?;
    let paths = ScenePaths {
        image: dir.join(IMAGE_FILE),
        depth: dir.join(DEPTH_FILE),
        camera: dir.join(CAMERA_FILE),
        camera_override: None,
    };
    image.write_png(&paths.image)?;
    depth.write_file(&paths.depth)?;
    write_json(&paths.camera, &scene.canonical)?;
    write_json(&dir.join(SCENE_FILE), &scene)?;
    Ok(paths)
}

pub fn read_scene_description(path: impl AsRef<Path>) -> Result<SyntheticScene> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        kind: "scene",
        detail: format!("{}: {e}", path.display()),
    })
}

pub struct TrainOutcome {
    pub stage1: Vec<LossRecord>,
    pub stage2: Vec<LossRecord>,
}

/// Both training stages on generated scenes; checkpoints and loss logs go to `cfg.output`.
pub fn train(cfg: &PipelineConfig, mut progress: impl FnMut(Stage, &LossRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    create_dir(&cfg.output)?;
    let t = &cfg.train;
    let scenes = (0..t.scenes)
        .map(|i| TrainScene::new(SyntheticScene::generate(t.kind, TRAIN_SCENE_SEED + i as u64, t.size, t.size)?, &cfg.model))
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(Model::new(cfg.model.clone())?, Stage::ViewSynthesis);
    let stage1 = train_stage1(&mut trainer, &scenes, &t.stage1, |r| progress(Stage::ViewSynthesis, r))?;
    trainer.save(cfg.output.join(STAGE1_CHECKPOINT))?;
    write_loss_log(cfg.output.join("stage1_loss.csv"), &stage1)?;
    let mut trainer = Trainer::stage2_from(&trainer)?;
    let stage2 = train_stage2(&mut trainer, &scenes, &t.stage2, |r| progress(Stage::Stylization, r))?;
    trainer.save(cfg.output.join(STAGE2_CHECKPOINT))?;
    write_loss_log(cfg.output.join("stage2_loss.csv"), &stage2)?;
    Ok(TrainOutcome { stage1, stage2 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub file: String,
    pub pose: [f64; 12],
    pub millis: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub style_id: String,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<FrameRecord>,
}

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}

/// Renders the trajectory to `output/frames`, one PNG per pose, plus a manifest.
pub fn stylize3d(cfg: &PipelineConfig) -> Result<Manifest> {
    let session = cfg.session()?;
    let cams = cfg.trajectory.cameras(session.canonical())?;
    let dir = cfg.output.join("frames");
    create_dir(&dir)?;
    let mut frames = Vec::with_capacity(cams.len());
    for (index, cam) in cams.iter().enumerate() {
        let start = Instant::now();
        let png = session.render_png(cam)?;
        let file = frame_name(index);
        let path = dir.join(&file);
        std::fs::write(&path, png).map_err(|e| Error::io(&path, e))?;
        frames.push(FrameRecord {
            index,
            file,
            pose: pose_to_flat(&cam.pose),
            millis: start.elapsed().as_secs_f64() * 1e3,
        });
        log::info!("frame {index} of {}", cams.len());
    }
    let manifest = Manifest {
        style_id: session.style_id(),
        width: session.canonical().width,
        height: session.canonical().height,
        frames,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Renders the trajectory and scores it; writes `consistency.json` and `.csv` to the output directory.
pub fn eval_consistency(cfg: &PipelineConfig) -> Result<ConsistencyReport> {
    let session = cfg.session()?;
    let cams = cfg.trajectory.cameras(session.canonical())?;
    let (frames, plans): (Vec<_>, Vec<_>) = cams.iter().map(|c| session.render(c)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let report = consistency_report(&session.model().pyramid, &frames, &plans)?;
    create_dir(&cfg.output)?;
    report.write_json(cfg.output.join("consistency.json"))?;
    report.write_csv(cfg.output.join("consistency.csv"))?;
    Ok(report)
}

/// Small model and schedule that runs the whole pipeline in seconds.
pub fn smoke_config(output: impl Into<PathBuf>, seed: u64) -> PipelineConfig {
    let output = output.into();
    let stage = |layers, channels, radius| StageConfig {
        layers,
        channels,
        downsample: 4,
        radius,
        k: 8,
    };
    let train = |iterations| TrainConfig {
        iterations,
        batch_size: 1,
        lr: 1e-3,
        styles: 2,
        style_size: 32,
        ..TrainConfig::default()
    };
    let scene_dir = output.join("scene");
    PipelineConfig {
        scene: ScenePaths {
            image: scene_dir.join(IMAGE_FILE),
            depth: scene_dir.join(DEPTH_FILE),
            camera: scene_dir.join(CAMERA_FILE),
            camera_override: None,
        },
        style: None,
        checkpoint: None,
        output,
        seed,
        model: ModelConfig {
            encoder: EncoderConfig {
                stages: vec![stage(1, 16, 0.15), stage(1, 32, 0.3)],
            },
            hidden: 16,
            attention: 16,
            seed,
        },
        train: TrainSchedule {
            kind: SceneKind::Boxes,
            scenes: 1,
            size: 32,
            stage1: train(30),
            stage2: train(30),
        },
        trajectory: Trajectory::Orbit {
            views: 4,
            radius: 0.08,
            focus: 2.5,
        },
        ..PipelineConfig::default()
    }
    .with_seed(seed)
}

/// Generates the smoke scene, trains, and renders the smoke trajectory.
pub fn smoke_run(cfg: &PipelineConfig, progress: impl FnMut(Stage, &LossRecord)) -> Result<Manifest> {
    let dir = cfg.scene.image.parent().unwrap_or(&cfg.output);
    make_scene(cfg.train.kind, cfg.seed, cfg.train.size, dir)?;
    train(cfg, progress)?;
    stylize3d(cfg)
}
