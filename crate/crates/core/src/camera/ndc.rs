use serde::{Deserialize, Serialize};

use super::{CameraSpec, Depth};
use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Which view, pixel (row-major index) and layer a point came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointSource {
    pub view: u32,
    pub pixel: u32,
    pub layer: u32,
}

/// Coloured points in world coordinates, in emission order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorldPoints {
    pub positions: Vec<[f64; 3]>,
    pub colors: Vec<[f32; 3]>,
    pub sources: Vec<PointSource>,
}

impl WorldPoints {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn push(&mut self, p: [f64; 3], c: [f32; 3], s: PointSource) {
        self.positions.push(p);
        self.colors.push(c);
        self.sources.push(s);
    }
}

/// Everything needed to invert the NDC map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NdcRecord {
    pub near: f64,
    pub far: f64,
    pub anchor: CameraSpec,
}

impl NdcRecord {
    pub fn new(anchor: CameraSpec, near: f64, far: f64) -> Result<Self> {
        if !(near > 0.0 && near < far && far.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < near < far, got near={near} far={far}"
            )));
        }
        anchor.validate()?;
        Ok(Self { near, far, anchor })
    }

    /// Anchor-camera-space point to NDC (unchecked).
    pub fn camera_to_ndc(&self, p: [f64; 3]) -> [f64; 3] {
        let a = &self.anchor;
        let [x, y, z] = p;
        [
            2.0 * (a.fx * x / z + a.cx) / a.width as f64 - 1.0,
            2.0 * (a.fy * y / z + a.cy) / a.height as f64 - 1.0,
            2.0 * ((1.0 / z - 1.0 / self.far) / (1.0 / self.near - 1.0 / self.far)) - 1.0,
        ]
    }

    pub fn ndc_to_camera(&self, p: [f32; 3]) -> Result<[f64; 3]> {
        if !(-1.0..=1.0).contains(&p[2]) {
            return Err(Error::NdcOutOfRange(p[2]));
        }
        let a = &self.anchor;
        let [x, y, zn] = p.map(|v| v as f64);
        let disparity = (zn + 1.0) / 2.0 * (1.0 / self.near - 1.0 / self.far) + 1.0 / self.far;
        let z = 1.0 / disparity;
        let u = (x + 1.0) / 2.0 * a.width as f64;
        let v = (y + 1.0) / 2.0 * a.height as f64;
        Ok(a.unproject_camera(u, v, z))
    }
}

/// Points in the anchor-camera NDC cube with their colours and lineage.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePointCloud {
    pub positions: Vec<[f32; 3]>,
    pub colors: Vec<[f32; 3]>,
    pub sources: Vec<PointSource>,
    pub record: NdcRecord,
}

impl ScenePointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// World-space position of point `i`.
    pub fn world_position(&self, i: usize) -> Result<[f64; 3]> {
        denormalize(self.positions[i], &self.record)
    }

    /// Reorders points; `order[k]` is the old index of new point `k`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            positions: order.iter().map(|&i| self.positions[i]).collect(),
            colors: order.iter().map(|&i| self.colors[i]).collect(),
            sources: order.iter().map(|&i| self.sources[i]).collect(),
            record: self.record.clone(),
        }
    }
}

/// One input view for multi-view merging.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceView {
    pub image: RgbImage,
    pub depth: Depth,
    pub camera: CameraSpec,
}

/// One world point per valid (pixel, layer), row-major, layers front to back.
///
/// Single-layer depth takes colour from `image`; layered depth uses each layer's own colour.
pub fn back_project(image: &RgbImage, depth: &Depth, cam: &CameraSpec) -> Result<WorldPoints> {
    let dims = depth.dims();
    if (image.width, image.height) != dims || (cam.width, cam.height) != dims {
        return Err(Error::DimensionMismatch {
            image: (image.width, image.height),
            depth: dims,
        });
    }
    let mut out = WorldPoints::default();
    let (w, h) = dims;
    let mut emit = |px: usize, layer: usize, d: f32, color: [f32; 3]| {
        let (u, v) = ((px % w) as f64 + 0.5, (px / w) as f64 + 0.5);
        let world = cam.camera_to_world(cam.unproject_camera(u, v, d as f64));
        out.push(
            world,
            color,
            PointSource {
                view: 0,
                pixel: px as u32,
                layer: layer as u32,
            },
        );
    };
    match depth {
        Depth::Single(d) => {
            for px in 0..w * h {
                if d.is_valid(px) {
                    emit(px, 0, d.values[px], image.pixel(px % w, px / w));
                }
            }
        }
        Depth::Layered(d) => {
            for px in 0..w * h {
                for (k, l) in d.pixel(px).iter().enumerate() {
                    emit(px, k, l.depth, l.rgb.map(|c| c as f32 / 255.0));
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::NoValidPixels);
    }
    Ok(out)
}

/// Maps world points into the NDC cube of `anchor` with depth linear in disparity.
pub fn normalize_ndc(points: &WorldPoints, anchor: &CameraSpec, near: f64, far: f64) -> Result<ScenePointCloud> {
    let record = NdcRecord::new(anchor.clone(), near, far)?;
    if points.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let mut positions = Vec::with_capacity(points.len());
    for (index, &p) in points.positions.iter().enumerate() {
        let c = anchor.world_to_camera(p);
        if c[2] <= 0.0 {
            return Err(Error::BehindCamera { index, z: c[2] });
        }
        let ndc = record.camera_to_ndc(c);
        // Round-off slack only; anything further out violates the preconditions.
        if ndc.iter().any(|v| !v.is_finite() || v.abs() > 1.0 + 1e-9) {
            return Err(Error::OutsideFrustum { index });
        }
        positions.push(ndc.map(|v| v.clamp(-1.0, 1.0) as f32));
    }
    Ok(ScenePointCloud {
        positions,
        colors: points.colors.clone(),
        sources: points.sources.clone(),
        record,
    })
}

pub fn denormalize(p: [f32; 3], record: &NdcRecord) -> Result<[f64; 3]> {
    Ok(record.anchor.camera_to_world(record.ndc_to_camera(p)?))
}

/// Union of all views' back-projections in the NDC cube of `views[center]`.
///
/// Views with no valid depth are skipped. Points outside the anchor frustum are
/// dropped. near/far are 0.95× / 1.05× the pooled anchor-space depth range.
pub fn merge_views(views: &[SourceView], center: usize) -> Result<ScenePointCloud> {
    let anchor = &views
        .get(center)
        .ok_or_else(|| Error::InvalidArgument(format!("center view {center} of {}", views.len())))?
        .camera;
    let mut pooled = WorldPoints::default();
    let mut zs = Vec::new();
    for (vi, view) in views.iter().enumerate() {
        let pts = match back_project(&view.image, &view.depth, &view.camera) {
            Ok(p) => p,
            Err(Error::NoValidPixels) => {
                log::warn!("view {vi} has no valid depth; skipped");
                continue;
            }
            Err(e) => return Err(e),
        };
        for ((&p, &c), &s) in pts.positions.iter().zip(&pts.colors).zip(&pts.sources) {
            let q = anchor.world_to_camera(p);
            let inside = anchor
                .project_camera(q)
                .is_some_and(|[u, v]| anchor.pixel_at(u, v).is_some());
            if inside {
                zs.push(q[2]);
                pooled.push(p, c, PointSource { view: vi as u32, ..s });
            }
        }
    }
    if pooled.is_empty() {
        return Err(Error::NoValidPixels);
    }
    let zmin = zs.iter().copied().fold(f64::INFINITY, f64::min);
    let zmax = zs.iter().copied().fold(0.0, f64::max);
    normalize_ndc(&pooled, anchor, 0.95 * zmin, 1.05 * zmax)
}
