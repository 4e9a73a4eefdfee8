//! Frozen random convolutional feature pyramid.
//!
//! Three 3×3 conv + ReLU levels (32/64/128 channels, strides 1/2/2) with
//! orthogonal weights drawn from a fixed seed. It is never trained; the same
//! instance serves style extraction, perceptual losses and evaluation.

use super::init::orthogonal;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::tensor::{Tape, Tensor, Var};

pub const PYRAMID_SEED: u64 = 0x5eed_f00d;
pub const PYRAMID_CHANNELS: [usize; 3] = [32, 64, 128];
pub const PYRAMID_STRIDES: [usize; 3] = [1, 2, 2];
pub const STYLE_CHANNELS: usize = 128;
pub const MIN_STYLE_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    weights: Vec<Tensor>,
}

impl Default for Pyramid {
    fn default() -> Self {
        Self::new(PYRAMID_SEED)
    }
}

impl Pyramid {
    pub fn new(seed: u64) -> Self {
        let mut cin = 3;
        let weights = PYRAMID_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let w = orthogonal(seed, &format!("pyramid.level{i}"), &[c, cin, 3, 3], 2f64.sqrt());
                cin = c;
                w
            })
            .collect();
        Self { weights }
    }

    /// Feature maps at all three levels for an image tensor `[1, 3, H, W]` in [0, 1].
    pub fn features(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        let centred = tape.add_scalar(image, -0.5);
        let mut x = tape.scale(centred, 2.0);
        let mut out = Vec::with_capacity(self.weights.len());
        for (w, &stride) in self.weights.iter().zip(&PYRAMID_STRIDES) {
            let wv = tape.constant(w.clone());
            let y = tape.conv2d(x, wv, None, stride, 1)?;
            x = tape.relu(y);
            out.push(x);
        }
        Ok(out)
    }

    /// Non-differentiable convenience: feature maps of an image.
    pub fn image_features(&self, image: &RgbImage) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.to_tensor());
        let levels = self.features(&mut tape, x)?;
        Ok(levels.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}

/// Deepest pyramid level flattened to a grid of vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleFeatures {
    /// `[H_s · W_s, C_s]`, row-major over the grid.
    pub features: Tensor,
    pub grid: (usize, usize),
    /// Centre of each grid cell in style-image pixel coordinates.
    pub origins: Vec<[f32; 2]>,
}

/// `[1, C, H, W]` → `[H·W, C]`.
pub fn map_to_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[1], s[2] * s[3]])?;
    tape.transpose(flat)
}

pub fn extract_style_features(pyramid: &Pyramid, style: &RgbImage) -> Result<StyleFeatures> {
    if style.width < MIN_STYLE_SIZE || style.height < MIN_STYLE_SIZE {
        return Err(Error::ImageTooSmall {
            width: style.width,
            height: style.height,
            min: MIN_STYLE_SIZE,
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(style.to_tensor());
    let levels = pyramid.features(&mut tape, x)?;
    let deepest = *levels.last().expect("three levels");
    let (gh, gw) = (tape.shape(deepest)[2], tape.shape(deepest)[3]);
    let rows = map_to_rows(&mut tape, deepest)?;
    let stride: usize = PYRAMID_STRIDES.iter().product();
    let origins = (0..gh)
        .flat_map(|y| (0..gw).map(move |x| [(x * stride) as f32 + 0.5, (y * stride) as f32 + 0.5]))
        .collect();
    Ok(StyleFeatures {
        features: tape.value(rows).clone(),
        grid: (gw, gh),
        origins,
    })
}
