use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{CameraSpec, ScenePointCloud};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::model::{extract_style_features, stylize, Binder, Model};
use crate::render::{render_frame, PreparedScene, SplatPlan};
use crate::synth::{rotation_between_deg, PoseRange};
use crate::tensor::{Tape, Tensor};
use crate::train::content_features;

/// Largest frame side the session renders.
pub const MAX_FRAME_SIDE: usize = 1024;
/// Allowed deviation of a pose's rotation block from orthonormal.
pub const ROTATION_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleUpdate {
    pub style_id: String,
    pub cache_hit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub width: usize,
    pub height: usize,
    pub points: usize,
    pub canonical: CameraSpec,
    pub canonical_pose: [f64; 12],
    pub bounds: PoseRange,
    pub style_id: String,
}

struct ActiveStyle {
    id: String,
    stylized: Arc<Tensor>,
}

/// Scene, model and content features loaded once; the stylized features are
/// recomputed only when a different style image arrives.
pub struct RenderSession {
    model: Model,
    scene: PreparedScene,
    content: Tensor,
    canonical: CameraSpec,
    bounds: PoseRange,
    style: RwLock<ActiveStyle>,
}

/// Content hash of the 8-bit pixels, so re-encodings of one image share an id.
pub fn style_id(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update((image.width as u32).to_le_bytes());
    h.update((image.height as u32).to_le_bytes());
    h.update(image.to_rgb8());
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl RenderSession {
    pub fn new(model: Model, cloud: ScenePointCloud, canonical: CameraSpec, bounds: PoseRange, style: &RgbImage) -> Result<Self> {
        let scene = PreparedScene::new(cloud, &model.config.encoder)?;
        let content = content_features(&model, &scene)?;
        let stylized = Self::stylized_features(&model, &content, style)?;
        Ok(Self {
            style: RwLock::new(ActiveStyle {
                id: style_id(style),
                stylized: Arc::new(stylized),
            }),
            model,
            scene,
            content,
            canonical,
            bounds,
        })
    }

    fn stylized_features(model: &Model, content: &Tensor, style: &RgbImage) -> Result<Tensor> {
        let rows = extract_style_features(&model.pyramid, style)?.features;
        let mut tape = Tape::new();
        let p = Binder::new(&model.params);
        let c = tape.constant(content.clone());
        let s = tape.constant(rows);
        let out = stylize(&mut tape, &p, c, s)?;
        Ok(tape.value(out.features).clone())
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn canonical(&self) -> &CameraSpec {
        &self.canonical
    }

    pub fn bounds(&self) -> PoseRange {
        self.bounds
    }

    pub fn style_id(&self) -> String {
        self.style.read().expect("style lock").id.clone()
    }

    pub fn info(&self) -> SessionInfo {
        SessionInfo {
            width: self.canonical.width,
            height: self.canonical.height,
            points: self.scene.cloud.len(),
            canonical: self.canonical.clone(),
            canonical_pose: super::pose_to_flat(&self.canonical.pose),
            bounds: self.bounds,
            style_id: self.style_id(),
        }
    }

    /// Switches style; a repeat of the active image keeps the cached features.
    pub fn set_style(&self, image: &RgbImage) -> Result<StyleUpdate> {
        let id = style_id(image);
        if self.style.read().expect("style lock").id == id {
            return Ok(StyleUpdate { style_id: id, cache_hit: true });
        }
        let stylized = Arc::new(Self::stylized_features(&self.model, &self.content, image)?);
        let mut active = self.style.write().expect("style lock");
        let cache_hit = active.id == id;
        if !cache_hit {
            *active = ActiveStyle { id: id.clone(), stylized };
        }
        Ok(StyleUpdate { style_id: id, cache_hit })
    }

    /// Validates a row-major 3×4 pose: malformed poses are `InvalidArgument`,
    /// poses beyond the bounds `PoseOutOfBounds`.
    pub fn check_pose(&self, pose: &[f64]) -> Result<[[f64; 4]; 3]> {
        let flat: &[f64; 12] = pose
            .try_into()
            .map_err(|_| Error::InvalidArgument(format!("pose needs 12 values, got {}", pose.len())))?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("pose has non-finite entries".into()));
        }
        let pose = super::pose_from_flat(flat);
        let r = nalgebra::Matrix3::from_fn(|i, j| pose[i][j]);
        let off = (r * r.transpose() - nalgebra::Matrix3::identity()).abs().max();
        if off > ROTATION_TOLERANCE || r.determinant() <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "pose rotation is not a proper rotation (orthonormality error {off:.2e})"
            )));
        }
        let cam = self.canonical.with_pose(pose)?;
        let (c0, c) = (self.canonical.centre(), cam.centre());
        let shift = (0..3).map(|k| (c[k] - c0[k]).abs()).fold(0.0, f64::max);
        let angle = rotation_between_deg(&self.canonical, &cam);
        if shift > self.bounds.translation + 1e-9 || angle > self.bounds.rotation_deg + 1e-9 {
            return Err(Error::PoseOutOfBounds(format!(
                "translation {shift:.4} (max {}), rotation {angle:.3}° (max {}°)",
                self.bounds.translation, self.bounds.rotation_deg
            )));
        }
        Ok(pose)
    }

    /// Camera at `pose` with the canonical field of view at `width × height`.
    pub fn camera(&self, pose: [[f64; 4]; 3], width: usize, height: usize) -> Result<CameraSpec> {
        if width == 0 || height == 0 || width % 4 != 0 || height % 4 != 0 || width.max(height) > MAX_FRAME_SIDE {
            return Err(Error::InvalidArgument(format!(
                "frame size {width}×{height} must be positive multiples of 4 up to {MAX_FRAME_SIDE}"
            )));
        }
        let c = &self.canonical;
        let (sx, sy) = (width as f64 / c.width as f64, height as f64 / c.height as f64);
        CameraSpec::new(c.fx * sx, c.fy * sy, c.cx * sx, c.cy * sy, width, height, pose)
    }

    /// Frame and splat plan for `cam`. Reads the session only; calls may overlap.
    pub fn render(&self, cam: &CameraSpec) -> Result<(RgbImage, SplatPlan)> {
        let stylized = self.style.read().expect("style lock").stylized.clone();
        render_frame(&self.model.params, &self.scene, &stylized, cam)
    }

    pub fn render_png(&self, cam: &CameraSpec) -> Result<Vec<u8>> {
        self.render(cam)?.0.encode_png()
    }
}
