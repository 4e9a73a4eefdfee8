//! Soft z-buffered bilinear point splatting and the full render path.
//!
//! Each point lands on the 2×2 pixel block around its projection with bilinear
//! weights, scaled by `exp(−λ·(z − z_min)/far)` where `z_min` is the nearest
//! depth touching that pixel. Per-pixel weights are normalised, so with fixed
//! geometry the feature map is a linear, convex combination of point features.

use std::sync::Arc;

use crate::camera::{CameraSpec, ScenePointCloud};
use crate::error::Result;
use crate::image::RgbImage;
use crate::model::encoder::{input_features, EncoderGeometry};
use crate::model::pyramid::map_to_rows;
use crate::model::{decode, Binder, EncoderConfig};
use crate::pointcloud::idw_weights;
use crate::tensor::{ParamStore, SparseMap, Tape, Tensor, Var};

pub const SOFT_Z_LAMBDA: f64 = 50.0;
pub const VISIBILITY_TAU: f64 = 1e-2;
pub const IDW_K: usize = 3;
pub const IDW_POWER: f64 = 2.0;

/// Geometry-only rasterisation result for one target camera.
#[derive(Clone, Debug)]
pub struct SplatPlan {
    pub width: usize,
    pub height: usize,
    /// Rows are pixels (row-major), columns are points.
    pub map: Arc<SparseMap>,
    /// Nearest splatted depth; `+∞` exactly where nothing lands.
    pub zbuffer: Vec<f32>,
    pub coverage: Vec<bool>,
    /// `(u, v, z)` in the target camera, `None` for points at or behind it.
    pub projected: Vec<Option<[f64; 3]>>,
    pub visible: Vec<bool>,
    pub behind: usize,
}

fn footprint(u: f64, v: f64, width: usize, height: usize) -> impl Iterator<Item = (usize, f64)> {
    let (x, y) = (u - 0.5, v - 0.5);
    let (x0, y0) = (x.floor(), y.floor());
    let (ax, ay) = (x - x0, y - y0);
    let taps = [
        (x0, y0, (1.0 - ax) * (1.0 - ay)),
        (x0 + 1.0, y0, ax * (1.0 - ay)),
        (x0, y0 + 1.0, (1.0 - ax) * ay),
        (x0 + 1.0, y0 + 1.0, ax * ay),
    ];
    taps.into_iter().filter_map(move |(px, py, w)| {
        let inside = px >= 0.0 && py >= 0.0 && px < width as f64 && py < height as f64;
        (inside && w > 0.0).then(|| (py as usize * width + px as usize, w))
    })
}

impl SplatPlan {
    /// `far` scales the soft-z falloff; pass the scene's NDC far plane.
    pub fn new(world: &[[f64; 3]], target: &CameraSpec, far: f64, lambda: f64) -> Self {
        let (w, h) = (target.width, target.height);
        let projected: Vec<Option<[f64; 3]>> = world.iter().map(|&p| target.project(p)).collect();
        let behind = projected.iter().filter(|p| p.is_none()).count();
        if behind > 0 {
            log::debug!("{behind} points behind the target camera skipped");
        }
        let mut zbuffer = vec![f64::INFINITY; w * h];
        for [u, v, z] in projected.iter().flatten() {
            for (px, _) in footprint(*u, *v, w, h) {
                zbuffer[px] = zbuffer[px].min(*z);
            }
        }
        let mut taps: Vec<Vec<(usize, f64)>> = vec![Vec::new(); w * h];
        for (i, p) in projected.iter().enumerate() {
            let Some([u, v, z]) = *p else { continue };
            for (px, b) in footprint(u, v, w, h) {
                taps[px].push((i, b * (-lambda * (z - zbuffer[px]) / far).exp()));
            }
        }
        let mut map = SparseMap::new(world.len());
        for row in &taps {
            let total: f64 = row.iter().map(|t| t.1).sum();
            map.push_row(row.iter().map(|&(i, wt)| (i, (wt / total) as f32)));
        }
        let coverage = taps.iter().map(|t| !t.is_empty()).collect();
        let visible = projected
            .iter()
            .map(|p| match *p {
                Some([u, v, z]) => target
                    .pixel_at(u, v)
                    .is_some_and(|(x, y)| (z - zbuffer[y * w + x]).abs() <= VISIBILITY_TAU * z),
                None => false,
            })
            .collect();
        Self {
            width: w,
            height: h,
            map: Arc::new(map),
            zbuffer: zbuffer.into_iter().map(|z| z as f32).collect(),
            coverage,
            projected,
            visible,
            behind,
        }
    }

    pub fn for_cloud(scene: &PreparedScene, target: &CameraSpec) -> Self {
        Self::new(&scene.world, target, scene.cloud.record.far, SOFT_Z_LAMBDA)
    }

    /// Pixel index of point `i` if it projects inside the image.
    pub fn pixel_of(&self, i: usize) -> Option<usize> {
        let [u, v, _] = self.projected[i]?;
        (u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64)
            .then(|| v as usize * self.width + u as usize)
    }
}

/// Point `i` is visible in both views.
pub fn covisible(a: &SplatPlan, b: &SplatPlan, i: usize) -> bool {
    a.visible[i] && b.visible[i]
}

/// `features [N, C]` → feature map `[1, C, H, W]`.
pub fn rasterize(tape: &mut Tape, plan: &SplatPlan, features: Var) -> Result<Var> {
    let c = tape.shape(features)[1];
    let rows = tape.sparse(features, plan.map.clone())?;
    let chw = tape.transpose(rows)?;
    tape.reshape(chw, &[1, c, plan.height, plan.width])
}

/// Per-scene geometry reused across every render of a cloud.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub cloud: ScenePointCloud,
    pub world: Vec<[f64; 3]>,
    pub geometry: EncoderGeometry,
    /// Full cloud ← encoder output points.
    pub upsample: Arc<SparseMap>,
    pub input: Tensor,
}

impl PreparedScene {
    pub fn new(cloud: ScenePointCloud, cfg: &EncoderConfig) -> Result<Self> {
        let geometry = EncoderGeometry::build(&cloud.positions, cfg)?;
        let upsample = Arc::new(idw_weights(&cloud.positions, geometry.output_positions(), IDW_K, IDW_POWER)?);
        let world = (0..cloud.len()).map(|i| cloud.world_position(i)).collect::<Result<_>>()?;
        let input = input_features(&cloud);
        Ok(Self {
            cloud,
            world,
            geometry,
            upsample,
            input,
        })
    }
}

pub struct RenderedView {
    pub plan: SplatPlan,
    pub features: Var,
    pub image: Var,
}

/// Upsample point features to the full cloud, rasterise for `target` and decode.
pub fn render_view(
    tape: &mut Tape,
    p: &Binder,
    scene: &PreparedScene,
    point_features: Var,
    target: &CameraSpec,
) -> Result<RenderedView> {
    let plan = SplatPlan::for_cloud(scene, target);
    render_with_plan(tape, p, scene, point_features, plan)
}

pub fn render_with_plan(
    tape: &mut Tape,
    p: &Binder,
    scene: &PreparedScene,
    point_features: Var,
    plan: SplatPlan,
) -> Result<RenderedView> {
    let full = tape.sparse(point_features, scene.upsample.clone())?;
    let features = rasterize(tape, &plan, full)?;
    let image = decode(tape, p, features)?;
    Ok(RenderedView { plan, features, image })
}

/// `[1, C, H, W]` image tensor → `[H·W, C]` rows, for per-pixel sampling.
pub fn image_rows(tape: &mut Tape, image: Var) -> Result<Var> {
    map_to_rows(tape, image)
}

pub fn to_image(tape: &Tape, image: Var) -> Result<RgbImage> {
    RgbImage::from_tensor(tape.value(image))
}

/// Inference render of fixed per-point features; also returns the plan for masks.
pub fn render_frame(
    params: &ParamStore,
    scene: &PreparedScene,
    point_features: &Tensor,
    target: &CameraSpec,
) -> Result<(RgbImage, SplatPlan)> {
    let mut tape = Tape::new();
    let p = Binder::new(params);
    let f = tape.constant(point_features.clone());
    let view = render_view(&mut tape, &p, scene, f, target)?;
    Ok((to_image(&tape, view.image)?, view.plan))
}
