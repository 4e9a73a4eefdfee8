//! Finite-difference sweeps over every tape op, the rasterizer, the layer
//! helpers and each loss term.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stylepoint::camera::look_at;
use stylepoint::image::RgbImage;
use stylepoint::model::encoder::mr_conv;
use stylepoint::model::layers::{batch_norm, init_batch_norm, instance_norm, Binder, Mode};
use stylepoint::model::pyramid::{map_to_rows, Pyramid};
use stylepoint::pointcloud::{ball_query, farthest_point_sample};
use stylepoint::render::{rasterize, SplatPlan, SOFT_Z_LAMBDA};
use stylepoint::tensor::{ParamStore, SparseMap, Tape, Tensor, Var};
use stylepoint::train::losses::*;

use super::oracles::{kink_free_cns_instance, mr_store, offset_target, plans, scene_points};
use super::{away_from_zero, fd_check, fd_check_piecewise, random_tensor, rng};

const H: f32 = 1e-3;

#[derive(Clone, Debug)]
pub struct Case {
    pub name: String,
    pub err: f64,
    /// Fraction of coordinates skipped because the stencil crossed a kink.
    pub skipped: f64,
}

fn case(name: impl Into<String>, err: f64) -> Case {
    Case { name: name.into(), err, skipped: 0.0 }
}

fn piecewise(name: impl Into<String>, (err, skipped): (f64, f64)) -> Case {
    Case { name: name.into(), err, skipped }
}

pub fn op_sweep() -> Vec<Case> {
    let mut r = rng(0x0905);
    let mut out = Vec::new();
    let a = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let b = random_tensor(&mut r, &[4], -1.0, 1.0);
    let pos = random_tensor(&mut r, &[3, 4], 0.5, 2.0);
    let pos_b = random_tensor(&mut r, &[1, 4], 0.5, 2.0);
    let kinked = away_from_zero(&mut r, &[4, 5], 0.05, 1.0);

    out.push(case("add", fd_check(&[a.clone(), b.clone()], H, |t, v| t.add(v[0], v[1]).unwrap())));
    out.push(case("sub", fd_check(&[a.clone(), b.clone()], H, |t, v| t.sub(v[0], v[1]).unwrap())));
    out.push(case("mul", fd_check(&[a.clone(), b.clone()], H, |t, v| t.mul(v[0], v[1]).unwrap())));
    out.push(case("div", fd_check(&[a.clone(), pos_b], H, |t, v| t.div(v[0], v[1]).unwrap())));
    out.push(case("scale", fd_check(&[a.clone()], H, |t, v| t.scale(v[0], -1.7))));
    out.push(case("add_scalar", fd_check(&[a.clone()], H, |t, v| t.add_scalar(v[0], 0.3))));
    out.push(case("exp", fd_check(&[a.clone()], H, |t, v| t.exp(v[0]))));
    out.push(case("log", fd_check(&[pos.clone()], H, |t, v| t.log(v[0]))));
    out.push(case("sqrt", fd_check(&[pos], H, |t, v| t.sqrt(v[0]))));
    out.push(case("sigmoid", fd_check(&[a.clone()], H, |t, v| t.sigmoid(v[0]))));
    out.push(case("relu", fd_check(&[kinked.clone()], H, |t, v| t.relu(v[0]))));
    out.push(case("leaky_relu", fd_check(&[kinked.clone()], H, |t, v| t.leaky_relu(v[0], 0.2))));
    out.push(case("abs", fd_check(&[kinked.clone()], H, |t, v| t.abs(v[0]))));
    out.push(case("clamp_min", fd_check(&[kinked], H, |t, v| t.clamp_min(v[0], 0.0))));

    let m = random_tensor(&mut r, &[4, 2], -1.0, 1.0);
    out.push(case("matmul", fd_check(&[a.clone(), m], H, |t, v| t.matmul(v[0], v[1]).unwrap())));
    out.push(case("transpose", fd_check(&[a.clone()], H, |t, v| t.transpose(v[0]).unwrap())));
    out.push(case("reshape", fd_check(&[a.clone()], H, |t, v| t.reshape(v[0], &[2, 6]).unwrap())));

    let x = random_tensor(&mut r, &[3, 4, 3], -1.0, 1.0);
    out.push(case("sum", fd_check(&[x.clone()], H, |t, v| t.sum(v[0]))));
    out.push(case("mean", fd_check(&[x.clone()], H, |t, v| t.mean(v[0]))));
    for axis in 0..3 {
        out.push(case(format!("sum_axis {axis}"), fd_check(&[x.clone()], H, |t, v| t.sum_axis(v[0], axis).unwrap())));
        out.push(case(format!("mean_axis {axis}"), fd_check(&[x.clone()], H, |t, v| t.mean_axis(v[0], axis).unwrap())));
        out.push(case(format!("var_axis {axis}"), fd_check(&[x.clone()], H, |t, v| t.var_axis(v[0], axis).unwrap())));
        out.push(case(format!("softmax {axis}"), fd_check(&[x.clone()], H, |t, v| t.softmax(v[0], axis).unwrap())));
        out.push(case(
            format!("standardize {axis}"),
            fd_check(&[x.clone()], H, |t, v| t.standardize(v[0], axis, 1e-5).unwrap()),
        ));
    }
    // Spacing well beyond h so no argmax flips inside the stencil.
    let spaced = Tensor::new(&[3, 4], (0..12).map(|i| ((i * 7) % 12) as f32 * 0.1).collect()).unwrap();
    out.push(case("max_axis", fd_check(&[spaced.clone()], H, |t, v| t.max_axis(v[0], 1).unwrap())));

    let wide = random_tensor(&mut r, &[3, 5], -1.0, 1.0);
    out.push(case("concat", fd_check(&[a.clone(), wide.clone()], H, |t, v| t.concat(&[v[0], v[1]], 1).unwrap())));
    let idx = Arc::new(vec![2, 0, 2, 1]);
    out.push(case("gather", fd_check(&[wide.clone()], H, |t, v| t.gather(v[0], idx.clone()).unwrap())));
    let sidx = Arc::new(vec![4, 0, 4]);
    out.push(case("scatter_add", fd_check(&[wide.clone()], H, |t, v| t.scatter_add(v[0], sidx.clone(), 5).unwrap())));
    let mut map = SparseMap::new(3);
    map.push_row([(0, 0.25), (2, 0.75)]);
    map.push_row([]);
    map.push_row([(1, 1.0), (1, 0.5)]);
    let map = Arc::new(map);
    out.push(case("sparse", fd_check(&[wide], H, |t, v| t.sparse(v[0], map.clone()).unwrap())));
    let spaced = Tensor::new(&[5, 3], (0..15).map(|i| ((i * 11) % 15) as f32 * 0.07).collect()).unwrap();
    let query = Arc::new(vec![0, 2, 4]);
    let neighbors = vec![vec![0, 1, 3], vec![], vec![1, 2, 4]];
    out.push(case(
        "max_relative",
        fd_check(&[spaced], H, |t, v| t.max_relative(v[0], query.clone(), &neighbors).unwrap()),
    ));

    let img = random_tensor(&mut r, &[1, 2, 5, 5], -1.0, 1.0);
    let w = random_tensor(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
    let bias = random_tensor(&mut r, &[3], -0.5, 0.5);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        out.push(case(
            format!("conv2d s{stride} p{pad}"),
            fd_check(&[img.clone(), w.clone(), bias.clone()], H, |t, v| {
                t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap()
            }),
        ));
    }
    let small = random_tensor(&mut r, &[1, 3, 3, 3], -1.0, 1.0);
    let bias = random_tensor(&mut r, &[2], -0.5, 0.5);
    out.push(case(
        "conv_transpose2d",
        fd_check(&[small, w, bias], H, |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1).unwrap()),
    ));

    out.extend(layer_sweep(&mut r));
    out
}

/// Rasterizer, normalisation layers and the point convolution.
fn layer_sweep(r: &mut ChaCha8Rng) -> Vec<Case> {
    let mut out = Vec::new();
    let pts = scene_points(r, 120);
    let cam = stylepoint::camera::CameraSpec::new(12.0, 12.0, 6.0, 5.0, 12, 10, stylepoint::camera::IDENTITY_POSE).unwrap();
    let plan = SplatPlan::new(&pts, &cam, 3.0, SOFT_Z_LAMBDA);
    let f = random_tensor(r, &[120, 3], -1.0, 1.0);
    out.push(case("rasterize", fd_check(&[f], H, |t, v| rasterize(t, &plan, v[0]).unwrap())));

    let mut store = ParamStore::new();
    init_batch_norm(&mut store, "bn", 5);
    store.insert("bn.gamma", random_tensor(r, &[5], 0.5, 1.5));
    store.insert("bn.beta", random_tensor(r, &[5], -0.5, 0.5));
    let x = random_tensor(r, &[7, 5], -2.0, 2.0);
    for mode in [Mode::Train, Mode::Eval] {
        out.push(case(
            format!("batch_norm {mode:?}"),
            fd_check(&[x.clone()], H, |t, v| batch_norm(t, &Binder::new(&store), "bn", v[0], mode).unwrap()),
        ));
    }
    let planes = random_tensor(r, &[1, 3, 4, 4], -1.0, 1.0);
    out.push(case("instance_norm", fd_check(&[planes], H, |t, v| instance_norm(t, v[0]).unwrap())));

    let n = 48;
    let positions: Vec<[f32; 3]> = (0..n)
        .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
        .collect();
    let query = farthest_point_sample(&positions, 12).unwrap().indices;
    let qpos: Vec<[f32; 3]> = query.iter().map(|&i| positions[i]).collect();
    let graph = ball_query(&qpos, &positions, 0.6, 6).unwrap();
    let store = mr_store(r, 4, 5);
    let feats = random_tensor(r, &[n, 4], -1.0, 1.0);
    let query = Arc::new(query);
    out.push(piecewise(
        "mr_conv",
        fd_check_piecewise(&[feats], H, |t, v| {
            mr_conv(t, &Binder::new(&store), "m", v[0], query.clone(), &graph, Mode::Eval).unwrap()
        }),
    ));
    out
}

fn total(tape: &mut Tape, terms: &[Var]) -> Var {
    terms[1..].iter().fold(terms[0], |acc, &t| tape.add(acc, t).unwrap())
}

fn rows_of(pyramid: &Pyramid, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let y = tape.constant(x.clone());
    let levels = pyramid.features(&mut tape, y).unwrap();
    let rows = map_to_rows(&mut tape, levels[2]).unwrap();
    tape.value(rows).clone()
}

// The scalar losses are rounded to f32, so a per-pixel difference quotient only
// resolves the gradient when the residuals are small. Targets sit a few
// hundredths away from the input, which keeps every L1 term off its kink while
// keeping the quadratic terms' gradients well above the output rounding.

/// Each loss term on its own.
pub fn loss_terms() -> Vec<Case> {
    let mut r = rng(26);
    let pyramid = Pyramid::default();
    let x = random_tensor(&mut r, &[1, 3, 16, 16], 0.1, 0.9);
    let near = |r: &mut ChaCha8Rng| RgbImage::from_tensor(&offset_target(r, &x, 0.02)).unwrap();
    let mut out = Vec::new();

    let gt = offset_target(&mut r, &x, 0.1);
    // Piecewise linear with every residual 0.1 from its kink: a wide step is exact.
    out.push(case("L_rgb", fd_check(&[x.clone()], 2e-2, |tape, v| rgb_loss(tape, v[0], &gt).unwrap())));

    let gt_levels = pyramid.image_features(&near(&mut r)).unwrap();
    out.push(piecewise(
        "L_feat",
        fd_check_piecewise(&[x.clone()], 1e-3, |tape, v| feature_loss(tape, &pyramid, v[0], &gt_levels).unwrap()),
    ));

    let (imgs, pl) = kink_free_cns_instance(0.03);
    let refs: Vec<&SplatPlan> = pl.iter().collect();
    out.push(case("L_cns", fd_check(&imgs, 1e-2, |tape, v| consistency_loss(tape, v, &refs).unwrap().loss)));

    let stats = StyleStats::new(&pyramid, &near(&mut r)).unwrap();
    out.push(piecewise(
        "L_global",
        fd_check_piecewise(&[x.clone()], 1e-3, |tape, v| {
            let levels = pyramid.features(tape, v[0]).unwrap();
            global_style_loss(tape, &levels, &stats).unwrap()
        }),
    ));

    let target = rows_of(&pyramid, &near(&mut r).to_tensor());
    out.push(piecewise(
        "L_local",
        fd_check_piecewise(&[x], 1e-3, |tape, v| {
            let levels = pyramid.features(tape, v[0]).unwrap();
            local_style_loss(tape, levels[2], &target).unwrap()
        }),
    ));
    out
}

/// Two nearby 16×16 views of a shared point set with smooth, nearly agreeing images,
/// so the consistency residuals stay small too.
fn two_view_instance(seed: u64) -> (Vec<Tensor>, Vec<SplatPlan>) {
    let mut r = rng(seed);
    let pts = scene_points(&mut r, 160);
    let up = [0.0, -1.0, 0.0];
    let cams: Vec<_> = [[0.0, 0.0, 0.0], [0.03, 0.01, 0.0]]
        .into_iter()
        .map(|eye| {
            stylepoint::camera::CameraSpec::new(16.0, 16.0, 8.0, 8.0, 16, 16, look_at(eye, [0.0, 0.0, 2.0], up).unwrap())
                .unwrap()
        })
        .collect();
    let pl = plans(&pts, &cams);
    let freq: Vec<[f32; 3]> = (0..3)
        .map(|_| [r.random_range(0.1..0.4), r.random_range(0.1..0.4), r.random_range(0.0..6.0)])
        .collect();
    let smooth = Tensor::new(
        &[1, 3, 16, 16],
        (0..3 * 256)
            .map(|i| {
                let (c, y, x) = (i / 256, (i / 16) % 16, i % 16);
                let [a, b, p] = freq[c];
                0.5 + 0.3 * (a * x as f32 + b * y as f32 + p).sin()
            })
            .collect(),
    )
    .unwrap();
    let imgs = vec![offset_target(&mut r, &smooth, 0.01), offset_target(&mut r, &smooth, 0.01)];
    (imgs, pl)
}

/// Full stage-one objective over two views: colour, features and consistency.
pub fn view_synthesis_objective(seed: u64) -> Case {
    let (imgs, pl) = two_view_instance(seed);
    let refs: Vec<&SplatPlan> = pl.iter().collect();
    let pyramid = Pyramid::default();
    let mut r = rng(seed + 1);
    let gts: Vec<Tensor> = imgs.iter().map(|x| offset_target(&mut r, x, 0.02)).collect();
    let gt_levels: Vec<Vec<Tensor>> = gts
        .iter()
        .map(|g| pyramid.image_features(&RgbImage::from_tensor(g).unwrap()).unwrap())
        .collect();
    piecewise(
        "L_view",
        fd_check_piecewise(&imgs, 1e-3, |tape, v| {
            let mut terms = Vec::new();
            for k in 0..2 {
                terms.push(rgb_loss(tape, v[k], &gts[k]).unwrap());
                terms.push(feature_loss(tape, &pyramid, v[k], &gt_levels[k]).unwrap());
            }
            terms.push(consistency_loss(tape, v, &refs).unwrap().loss);
            total(tape, &terms)
        }),
    )
}

/// Full stage-two objective over two views: global and local style plus consistency.
pub fn stylization_objective(seed: u64) -> Case {
    let (imgs, pl) = two_view_instance(seed);
    let refs: Vec<&SplatPlan> = pl.iter().collect();
    let pyramid = Pyramid::default();
    let mut r = rng(seed + 1);
    let style = RgbImage::from_tensor(&offset_target(&mut r, &imgs[0], 0.02)).unwrap();
    let stats = StyleStats::new(&pyramid, &style).unwrap();
    let targets: Vec<Tensor> = imgs.iter().map(|x| rows_of(&pyramid, &offset_target(&mut r, x, 0.02))).collect();
    piecewise(
        "L_style",
        fd_check_piecewise(&imgs, 1e-3, |tape, v| {
            let mut terms = Vec::new();
            for k in 0..2 {
                let levels = pyramid.features(tape, v[k]).unwrap();
                terms.push(global_style_loss(tape, &levels, &stats).unwrap());
                terms.push(local_style_loss(tape, levels[2], &targets[k]).unwrap());
            }
            terms.push(consistency_loss(tape, v, &refs).unwrap().loss);
            total(tape, &terms)
        }),
    )
}
