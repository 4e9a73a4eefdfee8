//! Warp-based multi-view consistency metrics.
//!
//! A view is warped onto another through the shared point cloud: every point
//! visible in both carries its source pixel to its target pixel, nearest depth
//! winning collisions. RMSE and a feature-space distance are then measured on
//! the transported pixels only.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::model::Pyramid;
use crate::render::{covisible, SplatPlan};
use crate::tensor::Tape;

/// Trajectory offset of the long-range pairs.
pub const LONG_RANGE_STRIDE: usize = 7;

pub const REPORT_SCHEMA: &str = include_str!("../schemas/consistency_report.schema.json");

#[derive(Clone, Debug, PartialEq)]
pub struct Warped {
    pub image: RgbImage,
    pub mask: Vec<bool>,
}

impl Warped {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Transports `source` (rendered with `from`) onto the view of `to`.
///
/// Colours are read at the nearest source pixel, so an identity warp copies
/// pixels exactly. `pair` only labels the error when nothing is co-visible.
pub fn warp(source: &RgbImage, from: &SplatPlan, to: &SplatPlan, pair: (usize, usize)) -> Result<Warped> {
    if (source.width, source.height) != (from.width, from.height) {
        return Err(Error::InvalidArgument(format!(
            "source image {}×{} vs view {}×{}",
            source.width, source.height, from.width, from.height
        )));
    }
    let (w, h) = (to.width, to.height);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut image = RgbImage::filled(w, h, [0.0; 3]);
    let mut mask = vec![false; w * h];
    for p in 0..from.projected.len() {
        if !covisible(from, to, p) {
            continue;
        }
        let (Some(src), Some(dst)) = (from.pixel_of(p), to.pixel_of(p)) else {
            continue;
        };
        let z = to.projected[p].expect("visible points project")[2];
        if z < depth[dst] {
            depth[dst] = z;
            mask[dst] = true;
            image.data[dst * 3..dst * 3 + 3].copy_from_slice(&source.data[src * 3..src * 3 + 3]);
        }
    }
    if !mask.contains(&true) {
        return Err(Error::EmptyCovisibility(pair.0, pair.1));
    }
    Ok(Warped { image, mask })
}

/// Root-mean-square difference over masked pixels and all channels.
pub fn masked_rmse(a: &RgbImage, b: &RgbImage, mask: &[bool]) -> Result<f64> {
    check_pair(a, b, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|m| *m.1) {
        for c in 0..3 {
            let d = a.data[i * 3 + c] as f64 - b.data[i * 3 + c] as f64;
            sum += d * d;
        }
        n += 3;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((sum / n as f64).sqrt())
}

fn check_pair(a: &RgbImage, b: &RgbImage, mask: &[bool]) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) || mask.len() != a.width * a.height {
        return Err(Error::InvalidArgument(format!(
            "images {}×{} and {}×{} with a {}-pixel mask",
            a.width,
            a.height,
            b.width,
            b.height,
            mask.len()
        )));
    }
    Ok(())
}

/// Mask-weighted mean squared distance between pyramid features, averaged over levels.
///
/// Both images are cropped to the mask's bounding box and pixels outside the
/// mask take the target's colour, so only masked content can differ. A feature
/// cell is weighted by the masked fraction of the pixels it covers.
pub fn masked_feature_distance(pyramid: &Pyramid, warped: &RgbImage, target: &RgbImage, mask: &[bool]) -> Result<f64> {
    check_pair(warped, target, mask)?;
    let w = warped.width;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|m| *m.1) {
        let (x, y) = (i % w, i / w);
        (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1));
    }
    if x0 == usize::MAX {
        return Err(Error::EmptyMask);
    }
    let (cw, ch) = (x1 - x0, y1 - y0);
    let crop_mask: Vec<bool> = (0..cw * ch).map(|i| mask[(y0 + i / cw) * w + x0 + i % cw]).collect();
    let a = RgbImage::from_fn(cw, ch, |x, y| {
        let i = (y0 + y) * w + x0 + x;
        if mask[i] { warped.pixel(x0 + x, y0 + y) } else { target.pixel(x0 + x, y0 + y) }
    });
    let b = RgbImage::from_fn(cw, ch, |x, y| target.pixel(x0 + x, y0 + y));
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.to_tensor()), tape.constant(b.to_tensor()));
    let (fa, fb) = (pyramid.features(&mut tape, va)?, pyramid.features(&mut tape, vb)?);
    let mut total = 0.0;
    let mut stride = 1;
    for (&la, &lb) in fa.iter().zip(&fb) {
        let shape = tape.shape(la).to_vec();
        let (c, lh, lw) = (shape[1], shape[2], shape[3]);
        stride = stride.max(ch.div_ceil(lh).max(cw.div_ceil(lw)));
        let (da, db) = (tape.value(la).data(), tape.value(lb).data());
        let (mut num, mut den) = (0.0, 0.0);
        for y in 0..lh {
            for x in 0..lw {
                let cells = (y * stride..((y + 1) * stride).min(ch))
                    .flat_map(|py| (x * stride..((x + 1) * stride).min(cw)).map(move |px| py * cw + px));
                let (hit, all) = cells.fold((0usize, 0usize), |(h, n), i| (h + crop_mask[i] as usize, n + 1));
                if hit == 0 {
                    continue;
                }
                let weight = hit as f64 / all as f64;
                let sq: f64 = (0..c)
                    .map(|k| {
                        let j = k * lh * lw + y * lw + x;
                        (da[j] as f64 - db[j] as f64).powi(2)
                    })
                    .sum();
                num += weight * sq / c as f64;
                den += weight;
            }
        }
        total += num / den;
    }
    Ok(total / fa.len() as f64)
}

/// Peak signal-to-noise ratio for images in [0, 1].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let mask = vec![true; a.width * a.height];
    let rmse = masked_rmse(a, b, &mask)?;
    Ok(-20.0 * rmse.log10())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Short,
    Long,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub source: usize,
    pub target: usize,
    pub kind: PairKind,
    pub rmse: f64,
    pub feature_distance: f64,
    pub covisible_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub source: usize,
    pub target: usize,
    pub kind: PairKind,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RangeSummary {
    pub pairs: usize,
    pub mean_rmse: Option<f64>,
    pub mean_feature_distance: Option<f64>,
}

impl RangeSummary {
    fn of<'a>(pairs: impl Iterator<Item = &'a PairMetrics>) -> Self {
        let mut s = Self::default();
        let (mut r, mut f) = (0.0, 0.0);
        for p in pairs {
            s.pairs += 1;
            r += p.rmse;
            f += p.feature_distance;
        }
        if s.pairs > 0 {
            s.mean_rmse = Some(r / s.pairs as f64);
            s.mean_feature_distance = Some(f / s.pairs as f64);
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub views: usize,
    pub pairs: Vec<PairMetrics>,
    pub skipped: Vec<SkippedPair>,
    pub short_range: RangeSummary,
    pub long_range: RangeSummary,
}

/// Adjacent and stride-[`LONG_RANGE_STRIDE`] pairs of a trajectory.
pub fn trajectory_pairs(views: usize) -> Vec<(usize, usize, PairKind)> {
    let short = (0..views.saturating_sub(1)).map(|i| (i, i + 1, PairKind::Short));
    let long = (0..views.saturating_sub(LONG_RANGE_STRIDE)).map(|i| (i, i + LONG_RANGE_STRIDE, PairKind::Long));
    short.chain(long).collect()
}

/// Evaluates every trajectory pair, warping the earlier frame onto the later one.
pub fn consistency_report(pyramid: &Pyramid, frames: &[RgbImage], plans: &[SplatPlan]) -> Result<ConsistencyReport> {
    if frames.len() < 2 || frames.len() != plans.len() {
        return Err(Error::InvalidArgument(format!(
            "consistency needs at least two frames with plans, got {} frames and {} plans",
            frames.len(),
            plans.len()
        )));
    }
    let outcomes = trajectory_pairs(frames.len())
        .into_par_iter()
        .map(|(i, j, kind)| -> Result<std::result::Result<PairMetrics, SkippedPair>> {
            let warped = match warp(&frames[i], &plans[i], &plans[j], (i, j)) {
                Ok(w) => w,
                Err(e @ Error::EmptyCovisibility(..)) => {
                    log::warn!("{e}");
                    return Ok(Err(SkippedPair {
                        source: i,
                        target: j,
                        kind,
                        reason: e.to_string(),
                    }));
                }
                Err(e) => return Err(e),
            };
            Ok(Ok(PairMetrics {
                source: i,
                target: j,
                kind,
                rmse: masked_rmse(&warped.image, &frames[j], &warped.mask)?,
                feature_distance: masked_feature_distance(pyramid, &warped.image, &frames[j], &warped.mask)?,
                covisible_pixels: warped.count(),
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut pairs, mut skipped) = (Vec::new(), Vec::new());
    for o in outcomes {
        match o {
            Ok(p) => pairs.push(p),
            Err(s) => skipped.push(s),
        }
    }
    Ok(ConsistencyReport {
        views: frames.len(),
        short_range: RangeSummary::of(pairs.iter().filter(|p| p.kind == PairKind::Short)),
        long_range: RangeSummary::of(pairs.iter().filter(|p| p.kind == PairKind::Long)),
        pairs,
        skipped,
    })
}

impl ConsistencyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// One row per evaluated pair.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let err = |e: csv::Error| Error::Format {
            kind: "report csv",
            detail: format!("{}: {e}", path.display()),
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        for p in &self.pairs {
            w.serialize(p).map_err(err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}
