//! Pinhole cameras, depth rasters and the camera-anchored NDC cube.
//!
//! Conventions: camera x right, y down, z forward. Pixel `(u, v)` covers
//! `[u, u+1) × [v, v+1)` in continuous image coordinates, so its centre is at
//! `(u + 0.5, v + 0.5)`. Depth is z-distance along the optical axis.

mod ndc;
mod ply;
mod raster;

pub use ndc::{
    back_project, denormalize, merge_views, normalize_ndc, NdcRecord, PointSource, ScenePointCloud,
    SourceView, WorldPoints,
};
pub use ply::{read_ply, write_ply, PlyCloud};
pub use raster::{Depth, DepthRaster, Layer, LayeredDepthRaster, DEPTH_MAGIC, LDI_MAGIC};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intrinsics plus a world→camera rigid transform `[R | t]` (row-major 3×4).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub pose: [[f64; 4]; 3],
}

pub const IDENTITY_POSE: [[f64; 4]; 3] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
];

impl CameraSpec {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        pose: [[f64; 4]; 3],
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            pose,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Centred principal point and a horizontal field of view in degrees.
    pub fn from_fov(width: usize, height: usize, fov_x_deg: f64, pose: [[f64; 4]; 3]) -> Result<Self> {
        let f = width as f64 / 2.0 / (fov_x_deg.to_radians() / 2.0).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height, pose)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidCamera(m));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive, got {} {}", self.fx, self.fy));
        }
        if self.width == 0 || self.height == 0 {
            return bad("empty image extent".into());
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return bad(format!("principal point ({}, {}) outside image", self.cx, self.cy));
        }
        if self.pose.iter().flatten().any(|v| !v.is_finite()) {
            return bad("non-finite pose".into());
        }
        let r = self.rotation();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-5 || r.determinant() < 0.0 {
            return bad(format!("rotation is not orthonormal (deviation {err:.2e})"));
        }
        Ok(())
    }

    pub fn with_pose(&self, pose: [[f64; 4]; 3]) -> Result<Self> {
        let cam = Self { pose, ..self.clone() };
        cam.validate()?;
        Ok(cam)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let p = &self.pose;
        Matrix3::new(
            p[0][0], p[0][1], p[0][2], p[1][0], p[1][1], p[1][2], p[2][0], p[2][1], p[2][2],
        )
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.pose[0][3], self.pose[1][3], self.pose[2][3])
    }

    /// Camera centre in world coordinates.
    pub fn centre(&self) -> [f64; 3] {
        let c = -(self.rotation().transpose() * self.translation());
        [c.x, c.y, c.z]
    }

    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation() * Vector3::from(p) + self.translation();
        [q.x, q.y, q.z]
    }

    pub fn camera_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation().transpose() * (Vector3::from(p) - self.translation());
        [q.x, q.y, q.z]
    }

    /// Camera-space point to continuous image coordinates; `None` at or behind the camera.
    pub fn project_camera(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        (p[2] > 0.0).then(|| [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy])
    }

    /// World point to `(u, v, z)` with continuous image coordinates and camera depth.
    pub fn project(&self, world: [f64; 3]) -> Option<[f64; 3]> {
        let c = self.world_to_camera(world);
        self.project_camera(c).map(|[u, v]| [u, v, c[2]])
    }

    /// Camera-space point on the ray through continuous image coordinate `(u, v)` at depth `z`.
    pub fn unproject_camera(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [z * (u - self.cx) / self.fx, z * (v - self.cy) / self.fy, z]
    }

    /// Pixel containing a continuous image coordinate, if inside the image.
    pub fn pixel_at(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        if u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64 {
            Some((u as usize, v as usize))
        } else {
            None
        }
    }
}

/// World→camera pose for a camera at `eye` looking at `target`; `up` is the world up hint.
///
/// With `up = (0, -1, 0)` and the camera looking down +z this yields the identity rotation.
pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Result<[[f64; 4]; 3]> {
    let z = Vector3::from(target) - Vector3::from(eye);
    if z.norm() < 1e-12 {
        return Err(Error::InvalidCamera("eye coincides with target".into()));
    }
    let z = z.normalize();
    let x = z.cross(&Vector3::from(up));
    if x.norm() < 1e-12 {
        return Err(Error::InvalidCamera("up vector parallel to view direction".into()));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Ok(pose_from_rt(&r, &(-(r * Vector3::from(eye)))))
}

pub fn pose_from_rt(r: &Matrix3<f64>, t: &Vector3<f64>) -> [[f64; 4]; 3] {
    let mut pose = [[0.0; 4]; 3];
    for i in 0..3 {
        for j in 0..3 {
            pose[i][j] = r[(i, j)];
        }
        pose[i][3] = t[i];
    }
    pose
}
