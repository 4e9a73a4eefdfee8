//! Synthetic training scenes with exact ground truth, and procedural style images.
//!
//! A scene is a textured room (seen from inside) holding a few textured boxes.
//! Textures are smooth solid functions of world position, so every view agrees
//! on the colour of a surface point.

use noise::{Fbm, MultiFractal, NoiseFn, Perlin};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{
    merge_views, CameraSpec, Depth, DepthRaster, ScenePointCloud, SourceView, IDENTITY_POSE,
};
use crate::error::{Error, Result};
use crate::image::RgbImage;

/// `base + Σ amp · sin(ω · p + φ)` per channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolidTexture {
    pub base: [f32; 3],
    pub waves: Vec<Wave>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub freq: [f64; 3],
    pub phase: f64,
    pub amp: [f32; 3],
}

impl SolidTexture {
    pub fn color(&self, p: [f64; 3]) -> [f32; 3] {
        let mut c = self.base;
        for w in &self.waves {
            let s = (w.freq[0] * p[0] + w.freq[1] * p[1] + w.freq[2] * p[2] + w.phase).sin() as f32;
            for k in 0..3 {
                c[k] += w.amp[k] * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }

    fn random(rng: &mut ChaCha8Rng, max_freq: f64) -> Self {
        let base = [0; 3].map(|_| rng.random_range(0.3f32..0.7));
        let waves = (0..2)
            .map(|_| Wave {
                freq: [0; 3].map(|_| rng.random_range(-max_freq..max_freq)),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                amp: [0; 3].map(|_| rng.random_range(-0.15f32..0.15)),
            })
            .collect();
        Self { base, waves }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub texture: SolidTexture,
}

impl Cuboid {
    /// Entry and exit ray parameters, if the ray meets the box.
    fn slab(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if o[k] < self.min[k] || o[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let a = (self.min[k] - o[k]) / d[k];
            let b = (self.max[k] - o[k]) / d[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1).then_some((t0, t1))
    }

    fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        (0..3).all(|k| p[k] > self.min[k] - margin && p[k] < self.max[k] + margin)
    }
}

/// Range of camera perturbations around the canonical pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRange {
    /// Per-axis translation bound, scene units.
    pub translation: f64,
    /// Rotation angle bound, degrees.
    pub rotation_deg: f64,
}

impl Default for PoseRange {
    fn default() -> Self {
        Self {
            translation: 0.15,
            rotation_deg: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Boxes,
    Planes,
    Room,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boxes" => Ok(Self::Boxes),
            "planes" => Ok(Self::Planes),
            "room" => Ok(Self::Room),
            other => Err(Error::InvalidArgument(format!(
                "unknown scene kind `{other}` (expected boxes, planes or room)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    /// Enclosing room, rendered from inside.
    pub room: Cuboid,
    pub boxes: Vec<Cuboid>,
    pub canonical: CameraSpec,
}

pub const SCENE_FOV_DEG: f64 = 60.0;

impl SyntheticScene {
    /// Random room with one to three boxes in front of the canonical camera.
    pub fn random(seed: u64, width: usize, height: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let canonical = CameraSpec::from_fov(width, height, SCENE_FOV_DEG, IDENTITY_POSE)?;
        let room = Cuboid {
            min: [-2.6, -2.0, -1.0],
            max: [2.6, 1.2, 4.5],
            texture: SolidTexture::random(&mut rng, 2.0),
        };
        let count = rng.random_range(1..=3);
        let mut boxes: Vec<Cuboid> = Vec::new();
        while boxes.len() < count {
            let size = [0; 3].map(|_| rng.random_range(0.35..0.8));
            let centre = [
                rng.random_range(-0.9..0.9),
                rng.random_range(-0.3..(1.2 - size[1] / 2.0)),
                rng.random_range(2.0..3.5),
            ];
            let b = Cuboid {
                min: [0, 1, 2].map(|k| centre[k] - size[k] / 2.0),
                max: [0, 1, 2].map(|k| centre[k] + size[k] / 2.0),
                texture: SolidTexture::random(&mut rng, 4.0),
            };
            let overlaps = boxes
                .iter()
                .any(|o| (0..3).all(|k| b.min[k] < o.max[k] + 0.05 && o.min[k] < b.max[k] + 0.05));
            if !overlaps {
                boxes.push(b);
            }
        }
        Ok(Self { room, boxes, canonical })
    }

    /// Scene of the given layout; `Boxes` is [`SyntheticScene::random`].
    pub fn generate(kind: SceneKind, seed: u64, width: usize, height: usize) -> Result<Self> {
        let mut scene = Self::random(seed, width, height)?;
        match kind {
            SceneKind::Boxes => {}
            SceneKind::Room => scene.boxes.clear(),
            SceneKind::Planes => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x91a7e5);
                let count = rng.random_range(2..=4);
                scene.boxes = (0..count)
                    .map(|k| {
                        // Thin fronto-parallel panels, staggered in depth.
                        let z = 1.8 + 0.5 * k as f64 + rng.random_range(0.0..0.3);
                        let (hw, hh) = (rng.random_range(0.25..0.6), rng.random_range(0.2..0.5));
                        let (x, y) = (rng.random_range(-0.8..0.8), rng.random_range(-0.5..0.6));
                        Cuboid {
                            min: [x - hw, y - hh, z],
                            max: [x + hw, y + hh, z + 0.02],
                            texture: SolidTexture::random(&mut rng, 4.0),
                        }
                    })
                    .collect();
            }
        }
        Ok(scene)
    }

    /// Fixed scenes used by tests and the CLI.
    pub fn preset(index: usize, width: usize, height: usize) -> Result<Self> {
        Self::random(0x5ce0_0000 + index as u64, width, height)
    }

    /// Nearest surface along a ray: `(t, colour)`.
    fn trace(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f32; 3])> {
        let mut best: Option<(f64, &Cuboid)> = None;
        for b in &self.boxes {
            if let Some((t0, _)) = b.slab(o, d) {
                if t0 > 1e-9 && best.is_none_or(|(t, _)| t0 < t) {
                    best = Some((t0, b));
                }
            }
        }
        if best.is_none() {
            let (_, t1) = self.room.slab(o, d)?;
            best = (t1 > 1e-9).then_some((t1, &self.room));
        }
        let (t, surf) = best?;
        let p = [0, 1, 2].map(|k| o[k] + t * d[k]);
        Some((t, surf.texture.color(p)))
    }

    /// Exact colour and z-depth at every pixel centre of `cam`.
    pub fn render(&self, cam: &CameraSpec) -> Result<(RgbImage, DepthRaster)> {
        let o = cam.centre();
        let mut image = RgbImage::filled(cam.width, cam.height, [0.0; 3]);
        let mut depth = vec![f32::NAN; cam.width * cam.height];
        for y in 0..cam.height {
            for x in 0..cam.width {
                // Direction with unit camera-space z, so the ray parameter is the depth.
                let p = cam.camera_to_world(cam.unproject_camera(x as f64 + 0.5, y as f64 + 0.5, 1.0));
                let d = [0, 1, 2].map(|k| p[k] - o[k]);
                if let Some((t, c)) = self.trace(o, d) {
                    image.set_pixel(x, y, c);
                    depth[y * cam.width + x] = t as f32;
                }
            }
        }
        let depth = DepthRaster::new(cam.width, cam.height, depth)?;
        Ok((image, depth))
    }

    /// Point cloud back-projected from the canonical view.
    pub fn point_cloud(&self) -> Result<ScenePointCloud> {
        let (image, depth) = self.render(&self.canonical)?;
        merge_views(
            &[SourceView {
                image,
                depth: Depth::Single(depth),
                camera: self.canonical.clone(),
            }],
            0,
        )
    }

    /// True when a camera centre lies safely inside free space.
    pub fn is_free(&self, p: [f64; 3]) -> bool {
        self.room.contains(p, -0.05) && !self.boxes.iter().any(|b| b.contains(p, 0.05))
    }
}

/// Canonical pose perturbed by a uniform translation in `±translation` per axis
/// and a rotation about the camera centre by a uniform angle in `[0, rotation]`
/// around a uniformly random axis.
pub fn sample_view(canonical: &CameraSpec, range: &PoseRange, rng: &mut impl Rng) -> Result<CameraSpec> {
    let offset = [0; 3].map(|_| uniform_sym(rng, range.translation));
    let axis: nalgebra::Vector3<f64> = loop {
        let v = nalgebra::Vector3::<f64>::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break v / n;
        }
    };
    let angle = if range.rotation_deg > 0.0 {
        rng.random_range(0.0..=range.rotation_deg).to_radians()
    } else {
        0.0
    };
    perturb(canonical, offset, axis.into(), angle)
}

fn uniform_sym(rng: &mut impl Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

/// Moves the camera centre by `offset` (world units) and rotates the view by
/// `angle` radians about `axis` (camera frame) through the centre.
pub fn perturb(canonical: &CameraSpec, offset: [f64; 3], axis: [f64; 3], angle: f64) -> Result<CameraSpec> {
    use nalgebra::{Rotation3, Unit, Vector3};
    let r0 = canonical.rotation();
    let c0 = Vector3::from(canonical.centre()) + Vector3::from(offset);
    let rot = Rotation3::from_axis_angle(&Unit::new_normalize(Vector3::from(axis)), angle);
    let r = rot.matrix() * r0;
    let t = -(r * c0);
    canonical.with_pose(crate::camera::pose_from_rt(&r, &t))
}

/// Angle of the rotation taking `a`'s orientation to `b`'s, degrees.
pub fn rotation_between_deg(a: &CameraSpec, b: &CameraSpec) -> f64 {
    let rel = b.rotation() * a.rotation().transpose();
    let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleKind {
    Perlin,
    Stripes,
    Patches,
}

impl StyleKind {
    pub const ALL: [StyleKind; 3] = [StyleKind::Perlin, StyleKind::Stripes, StyleKind::Patches];
}

fn palette(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f32; 3]> {
    (0..n).map(|_| [0; 3].map(|_| rng.random_range(0.0f32..1.0))).collect()
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * t)
}

/// Procedural stand-in for a painting.
pub fn procedural_style(kind: StyleKind, seed: u64, width: usize, height: usize) -> Result<RgbImage> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("style image must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let colors = palette(&mut rng, 3);
    let img = match kind {
        StyleKind::Perlin => {
            let fbm = Fbm::<Perlin>::new(rng.random()).set_octaves(4);
            let scale = rng.random_range(3.0..8.0) / width.max(height) as f64;
            RgbImage::from_fn(width, height, |x, y| {
                let n = fbm.get([x as f64 * scale, y as f64 * scale]);
                let t = ((n + 1.0) / 2.0).clamp(0.0, 1.0) as f32;
                if t < 0.5 {
                    mix(colors[0], colors[1], t * 2.0)
                } else {
                    mix(colors[1], colors[2], t * 2.0 - 1.0)
                }
            })
        }
        StyleKind::Stripes => {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let period = rng.random_range(4.0..12.0);
            let (s, c) = theta.sin_cos();
            RgbImage::from_fn(width, height, |x, y| {
                let p = (x as f64 * c + y as f64 * s) / period;
                let band = p.floor().rem_euclid(3.0) as usize;
                let edge = (p.fract() * std::f64::consts::PI).sin() as f32;
                mix(colors[band], [1.0; 3], 0.15 * edge)
            })
        }
        StyleKind::Patches => {
            let cell = rng.random_range(6..14usize);
            let (cw, ch) = (width.div_ceil(cell), height.div_ceil(cell));
            let cells: Vec<[f32; 3]> = (0..cw * ch)
                .map(|_| {
                    let c = colors[rng.random_range(0..3)];
                    c.map(|v| (v + rng.random_range(-0.12f32..0.12)).clamp(0.0, 1.0))
                })
                .collect();
            RgbImage::from_fn(width, height, |x, y| cells[(y / cell) * cw + x / cell])
        }
    };
    Ok(img)
}

/// A bank of styles cycling through every kind.
pub fn style_bank(count: usize, seed: u64, size: usize) -> Result<Vec<RgbImage>> {
    (0..count)
        .map(|i| procedural_style(StyleKind::ALL[i % 3], seed.wrapping_add(i as u64), size, size))
        .collect()
}
