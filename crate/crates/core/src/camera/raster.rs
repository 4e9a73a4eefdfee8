//! Depth rasters and their binary file formats.
//!
//! `DPTH`: magic, u32 width, u32 height, then `width·height` f32 (NaN = invalid), row-major.
//!
//! `LDI0`: magic, u32 width, u32 height, then per pixel in row-major order a u8 layer
//! count followed by that many `(f32 depth, u8 r, u8 g, u8 b)` records, front to back.
//! All integers and floats little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const DEPTH_MAGIC: &[u8; 4] = b"DPTH";
pub const LDI_MAGIC: &[u8; 4] = b"LDI0";

fn is_valid_depth(d: f32) -> bool {
    d.is_finite() && d > 0.0
}

/// Single-layer metric depth; non-finite or non-positive entries are invalid.
#[derive(Clone, Debug)]
pub struct DepthRaster {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl PartialEq for DepthRaster {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()))
    }
}

impl DepthRaster {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} depth raster needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn is_valid(&self, index: usize) -> bool {
        is_valid_depth(self.values[index])
    }

    pub fn mask(&self) -> Vec<bool> {
        self.values.iter().map(|&d| is_valid_depth(d)).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&d| is_valid_depth(d)).count()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + 4 * self.values.len());
        buf.extend_from_slice(DEPTH_MAGIC);
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        for &d in &self.values {
            let d = if is_valid_depth(d) { d } else { f32::NAN };
            buf.extend_from_slice(&d.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let err = |d: &str| format_err("depth", d);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| err("truncated header"))?;
        if &magic != DEPTH_MAGIC {
            return Err(err(&format!("bad magic {magic:?}")));
        }
        let width = read_u32(&mut r, "depth")? as usize;
        let height = read_u32(&mut r, "depth")? as usize;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != width * height * 4 {
            return Err(err(&format!(
                "expected {} payload bytes, found {}",
                width * height * 4,
                payload.len()
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(width, height, values)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read(bytes.as_slice())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Layer {
    pub depth: f32,
    pub rgb: [u8; 3],
}

/// Per-pixel front-to-back layers; each layer carries its own colour.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredDepthRaster {
    pub width: usize,
    pub height: usize,
    layers: Vec<Vec<Layer>>,
}

impl LayeredDepthRaster {
    pub fn new(width: usize, height: usize, layers: Vec<Vec<Layer>>) -> Result<Self> {
        if layers.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} LDI needs {} pixel lists, got {}",
                width * height,
                layers.len()
            )));
        }
        for (i, px) in layers.iter().enumerate() {
            if px.len() > u8::MAX as usize {
                return Err(Error::InvalidArgument(format!("pixel {i} has {} layers", px.len())));
            }
            if let Some(l) = px.iter().find(|l| !is_valid_depth(l.depth)) {
                return Err(Error::InvalidArgument(format!("pixel {i} has invalid depth {}", l.depth)));
            }
            if px.windows(2).any(|w| w[1].depth <= w[0].depth) {
                return Err(Error::InvalidArgument(format!(
                    "pixel {i} layer depths are not strictly increasing"
                )));
            }
        }
        Ok(Self { width, height, layers })
    }

    /// Single-layer LDI from an image and depth raster; invalid pixels get no layer.
    pub fn from_depth(image: &RgbImage, depth: &DepthRaster) -> Result<Self> {
        if (image.width, image.height) != (depth.width, depth.height) {
            return Err(Error::DimensionMismatch {
                image: (image.width, image.height),
                depth: (depth.width, depth.height),
            });
        }
        let rgb8 = image.to_rgb8();
        let layers = (0..depth.values.len())
            .map(|i| {
                if depth.is_valid(i) {
                    vec![Layer {
                        depth: depth.values[i],
                        rgb: [rgb8[3 * i], rgb8[3 * i + 1], rgb8[3 * i + 2]],
                    }]
                } else {
                    vec![]
                }
            })
            .collect();
        Self::new(depth.width, depth.height, layers)
    }

    pub fn pixel(&self, index: usize) -> &[Layer] {
        &self.layers[index]
    }

    pub fn layer_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(LDI_MAGIC);
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        for px in &self.layers {
            buf.push(px.len() as u8);
            for l in px {
                buf.extend_from_slice(&l.depth.to_le_bytes());
                buf.extend_from_slice(&l.rgb);
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let err = |d: &str| format_err("ldi", d);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| err("truncated header"))?;
        if &magic != LDI_MAGIC {
            return Err(err(&format!("bad magic {magic:?}")));
        }
        let width = read_u32(&mut r, "ldi")? as usize;
        let height = read_u32(&mut r, "ldi")? as usize;
        let mut layers = Vec::with_capacity(width * height);
        for _ in 0..width * height {
            let mut n = [0u8; 1];
            r.read_exact(&mut n).map_err(|_| err("truncated layer count"))?;
            let mut px = Vec::with_capacity(n[0] as usize);
            for _ in 0..n[0] {
                let mut rec = [0u8; 7];
                r.read_exact(&mut rec).map_err(|_| err("truncated layer"))?;
                px.push(Layer {
                    depth: f32::from_le_bytes([rec[0], rec[1], rec[2], rec[3]]),
                    rgb: [rec[4], rec[5], rec[6]],
                });
            }
            layers.push(px);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(err("trailing bytes"));
        }
        Self::new(width, height, layers).map_err(|e| err(&e.to_string()))
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read(bytes.as_slice())
    }
}

/// Either depth representation accepted by back-projection.
#[derive(Clone, Debug, PartialEq)]
pub enum Depth {
    Single(DepthRaster),
    Layered(LayeredDepthRaster),
}

impl Depth {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Depth::Single(d) => (d.width, d.height),
            Depth::Layered(d) => (d.width, d.height),
        }
    }

    /// Reads either format, dispatching on the magic bytes.
    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        match bytes.get(..4) {
            Some(m) if m == LDI_MAGIC => Ok(Depth::Layered(LayeredDepthRaster::read(bytes.as_slice())?)),
            _ => Ok(Depth::Single(DepthRaster::read(bytes.as_slice())?)),
        }
    }
}

impl From<DepthRaster> for Depth {
    fn from(d: DepthRaster) -> Self {
        Depth::Single(d)
    }
}

impl From<LayeredDepthRaster> for Depth {
    fn from(d: LayeredDepthRaster) -> Self {
        Depth::Layered(d)
    }
}

fn format_err(kind: &'static str, detail: &str) -> Error {
    Error::Format {
        kind,
        detail: detail.to_string(),
    }
}

fn read_u32<R: Read>(r: &mut R, kind: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| format_err(kind, "truncated header"))?;
    Ok(u32::from_le_bytes(b))
}
