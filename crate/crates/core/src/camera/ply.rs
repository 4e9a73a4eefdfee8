//! ASCII PLY with `x y z red green blue` vertices.

use std::fmt::Write as _;
use std::path::Path;

use super::ScenePointCloud;
use crate::error::{Error, Result};
use crate::image::quantize;

#[derive(Clone, Debug, PartialEq)]
pub struct PlyCloud {
    pub positions: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
}

impl From<&ScenePointCloud> for PlyCloud {
    fn from(c: &ScenePointCloud) -> Self {
        Self {
            positions: c.positions.clone(),
            colors: c.colors.iter().map(|c| c.map(quantize)).collect(),
        }
    }
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PlyCloud) -> Result<()> {
    let mut s = String::new();
    let _ = write!(
        s,
        "ply\nformat ascii 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.positions.len()
    );
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        let _ = writeln!(s, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]);
    }
    let path = path.as_ref();
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PlyCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |d: String| Error::Format { kind: "ply", detail: d };
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(err("missing `ply` header".into()));
    }
    let mut count = None;
    for line in lines.by_ref() {
        if line == "end_header" {
            break;
        }
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>().map_err(|e| err(e.to_string()))?);
        }
    }
    let count = count.ok_or_else(|| err("no vertex element".into()))?;
    let mut out = PlyCloud {
        positions: Vec::with_capacity(count),
        colors: Vec::with_capacity(count),
    };
    for (i, line) in lines.take(count).enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(err(format!("vertex {i}: expected 6 fields")));
        }
        let p = |k: usize| f[k].parse::<f32>().map_err(|e| err(format!("vertex {i}: {e}")));
        let c = |k: usize| f[k].parse::<u8>().map_err(|e| err(format!("vertex {i}: {e}")));
        out.positions.push([p(0)?, p(1)?, p(2)?]);
        out.colors.push([c(3)?, c(4)?, c(5)?]);
    }
    if out.positions.len() != count {
        return Err(err(format!("expected {count} vertices, found {}", out.positions.len())));
    }
    Ok(out)
}
