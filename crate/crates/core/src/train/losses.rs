//! Training objectives: view synthesis, multi-view consistency and stylization.

use crate::error::{Error, Result};
use crate::image::{bilinear_taps, RgbImage};
use crate::model::pyramid::map_to_rows;
use crate::model::{adaattn, Pyramid};
use crate::render::{covisible, SplatPlan};
use crate::tensor::{SparseMap, Tape, Tensor, Var};

/// Added to variances before the square root in style statistics.
pub const STD_EPS: f32 = 1e-5;

fn check_same(what: &'static str, tape: &Tape, a: Var, b: &Tensor) -> Result<()> {
    if tape.shape(a) != b.shape() {
        return Err(Error::shape(what, b.shape(), tape.shape(a)));
    }
    Ok(())
}

/// Mean absolute pixel error.
pub fn rgb_loss(tape: &mut Tape, rendered: Var, gt: &Tensor) -> Result<Var> {
    check_same("rgb_loss", tape, rendered, gt)?;
    let g = tape.constant(gt.clone());
    let d = tape.sub(rendered, g)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

fn mse(tape: &mut Tape, a: Var, b: &Tensor) -> Result<Var> {
    check_same("mse", tape, a, b)?;
    let bv = tape.constant(b.clone());
    let d = tape.sub(a, bv)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

fn add_all(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut it = terms.iter().copied();
    let first = it.next().ok_or_else(|| Error::InvalidArgument("no loss terms".into()))?;
    it.try_fold(first, |acc, t| tape.add(acc, t))
}

/// Sum over pyramid levels of the feature mean squared error.
pub fn feature_loss(tape: &mut Tape, pyramid: &Pyramid, rendered: Var, gt_levels: &[Tensor]) -> Result<Var> {
    let levels = pyramid.features(tape, rendered)?;
    let terms = levels
        .iter()
        .zip(gt_levels)
        .map(|(&f, g)| mse(tape, f, g))
        .collect::<Result<Vec<_>>>()?;
    add_all(tape, &terms)
}

/// Bilinear sampling rows, one per point, into a row-major `width × height` image.
pub fn sampling_map(plan: &SplatPlan, points: &[usize]) -> SparseMap {
    let mut map = SparseMap::new(plan.width * plan.height);
    for &p in points {
        let [u, v, _] = plan.projected[p].expect("sampled points project into the view");
        map.push_row(bilinear_taps(u, v, plan.width, plan.height));
    }
    map
}

pub struct Consistency {
    pub loss: Var,
    /// Visible `(p, i, j)` triples over unordered view pairs.
    pub triples: usize,
}

/// Mean L1 colour disagreement of co-visible points across every unordered view pair.
///
/// `images` are `[1, C, H, W]` renders with matching `plans`. With no co-visible
/// triple the loss is an exact zero.
pub fn consistency_loss(tape: &mut Tape, images: &[Var], plans: &[&SplatPlan]) -> Result<Consistency> {
    if images.len() < 2 || images.len() != plans.len() {
        return Err(Error::InvalidArgument(format!(
            "consistency needs at least two rendered views with plans, got {} images and {} plans",
            images.len(),
            plans.len()
        )));
    }
    let rows = images.iter().map(|&im| map_to_rows(tape, im)).collect::<Result<Vec<_>>>()?;
    let n = plans[0].projected.len();
    let mut terms = Vec::new();
    let mut triples = 0;
    for i in 0..plans.len() {
        for j in i + 1..plans.len() {
            let pts: Vec<usize> = (0..n).filter(|&p| covisible(plans[i], plans[j], p)).collect();
            if pts.is_empty() {
                continue;
            }
            triples += pts.len();
            let a = tape.sparse(rows[i], sampling_map(plans[i], &pts).into())?;
            let b = tape.sparse(rows[j], sampling_map(plans[j], &pts).into())?;
            let d = tape.sub(a, b)?;
            let abs = tape.abs(d);
            terms.push(tape.sum(abs));
        }
    }
    let loss = if terms.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let total = add_all(tape, &terms)?;
        tape.scale(total, 1.0 / triples as f32)
    };
    Ok(Consistency { loss, triples })
}

/// Per-channel mean and standard deviation over the spatial positions of a `[1, C, H, W]` map.
fn moments(tape: &mut Tape, map: Var) -> Result<(Var, Var)> {
    let rows = map_to_rows(tape, map)?;
    let mean = tape.mean_axis(rows, 0)?;
    let var = tape.var_axis(rows, 0)?;
    let var = tape.add_scalar(var, STD_EPS);
    Ok((mean, tape.sqrt(var)))
}

/// Channel statistics of a style image at every pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleStats {
    pub levels: Vec<(Tensor, Tensor)>,
}

impl StyleStats {
    pub fn new(pyramid: &Pyramid, style: &RgbImage) -> Result<Self> {
        let mut tape = Tape::new();
        let x = tape.constant(style.to_tensor());
        let maps = pyramid.features(&mut tape, x)?;
        let levels = maps
            .into_iter()
            .map(|m| {
                let (mu, sd) = moments(&mut tape, m)?;
                Ok((tape.value(mu).clone(), tape.value(sd).clone()))
            })
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }
}

/// `Σ_levels ‖μ(f_r) − μ(f_s)‖² + ‖σ(f_r) − σ(f_s)‖²` on the rendered pyramid maps.
pub fn global_style_loss(tape: &mut Tape, rendered_levels: &[Var], style: &StyleStats) -> Result<Var> {
    let mut terms = Vec::new();
    for (&f, (mu_s, sd_s)) in rendered_levels.iter().zip(&style.levels) {
        let (mu, sd) = moments(tape, f)?;
        for (a, b) in [(mu, mu_s), (sd, sd_s)] {
            let bv = tape.constant(b.clone());
            let d = tape.sub(a, bv)?;
            let sq = tape.mul(d, d)?;
            terms.push(tape.sum(sq));
        }
    }
    add_all(tape, &terms)
}

/// Deepest-level target: the parameter-free attention-normalised content under the style.
pub fn local_style_target(pyramid: &Pyramid, content: &RgbImage, style_rows: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(content.to_tensor());
    let maps = pyramid.features(&mut tape, x)?;
    let c = map_to_rows(&mut tape, *maps.last().expect("three levels"))?;
    let s = tape.constant(style_rows.clone());
    let t = adaattn(&mut tape, c, s)?;
    Ok(tape.value(t).clone())
}

/// Mean squared error between the deepest rendered map (as rows) and a fixed target.
pub fn local_style_loss(tape: &mut Tape, rendered_deepest: Var, target: &Tensor) -> Result<Var> {
    let rows = map_to_rows(tape, rendered_deepest)?;
    mse(tape, rows, target)
}
