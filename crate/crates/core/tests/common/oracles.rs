//! Brute-force references and small instances shared by the suites.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylepoint::camera::{denormalize, look_at, normalize_ndc, CameraSpec, PointSource, WorldPoints};
use stylepoint::model::layers::{init_batch_norm, Binder, Mode, NORM_EPS};
use stylepoint::model::encoder::mr_conv;
use stylepoint::pointcloud::{NeighborGraph, Point};
use stylepoint::render::{rasterize, SplatPlan, SOFT_Z_LAMBDA};
use stylepoint::tensor::{ParamStore, Tape, Tensor, Var};
use stylepoint::train::losses::consistency_loss;

use super::{random_tensor, rng};

fn camera(w: usize, h: usize, pose: [[f64; 4]; 3]) -> CameraSpec {
    CameraSpec::new(w as f64, w as f64, w as f64 / 2.0, h as f64 / 2.0, w, h, pose).unwrap()
}

pub fn cube_cloud(seed: u64, n: usize) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect()
}

pub fn dist(a: &Point, b: &Point) -> f64 {
    (0..3).map(|k| (a[k] as f64 - b[k] as f64).powi(2)).sum::<f64>().sqrt()
}

/// Greedy max-min recomputed from scratch at every step.
pub fn fps_oracle(pts: &[Point], m: usize) -> Vec<usize> {
    let n = pts.len() as f64;
    let c: Vec<f64> = (0..3).map(|k| pts.iter().map(|p| p[k] as f64).sum::<f64>() / n).collect();
    let mut seed = 0;
    for i in 1..pts.len() {
        let di: f64 = (0..3).map(|k| (pts[i][k] as f64 - c[k]).powi(2)).sum();
        let ds: f64 = (0..3).map(|k| (pts[seed][k] as f64 - c[k]).powi(2)).sum();
        if di < ds {
            seed = i;
        }
    }
    let mut sel = vec![seed];
    while sel.len() < m {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..pts.len() {
            if sel.contains(&i) {
                continue;
            }
            let md = sel.iter().map(|&s| dist(&pts[i], &pts[s])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| md > bd) {
                best = Some((md, i));
            }
        }
        sel.push(best.unwrap().1);
    }
    sel
}

pub fn ball_oracle(q: &[Point], s: &[Point], r: f32, k: usize) -> Vec<Vec<u32>> {
    q.iter()
        .map(|qp| {
            let mut out = Vec::new();
            for (j, sp) in s.iter().enumerate() {
                let dx = qp[0] as f64 - sp[0] as f64;
                let dy = qp[1] as f64 - sp[1] as f64;
                let dz = qp[2] as f64 - sp[2] as f64;
                if dx * dx + dy * dy + dz * dz <= (r as f64) * (r as f64) && out.len() < k {
                    out.push(j as u32);
                }
            }
            out
        })
        .collect()
}

pub fn idw_oracle(t: &Point, src: &[Point], f: &[f32], c: usize, k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..src.len()).collect();
    order.sort_by(|&a, &b| dist(t, &src[a]).partial_cmp(&dist(t, &src[b])).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    if dist(t, &src[order[0]]) < 1e-8 {
        return (0..c).map(|ch| f[order[0] * c + ch] as f64).collect();
    }
    let w: Vec<f64> = order.iter().map(|&j| 1.0 / dist(t, &src[j]).max(1e-8).powi(2)).collect();
    let total: f64 = w.iter().sum();
    (0..c)
        .map(|ch| order.iter().zip(&w).map(|(&j, wi)| wi * f[j * c + ch] as f64).sum::<f64>() / total)
        .collect()
}

pub fn random_features(seed: u64, n: usize, c: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect()
}

pub fn mr_store(rng: &mut rand_chacha::ChaCha8Rng, cin: usize, cout: usize) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("m.weight", random_tensor(rng, &[2 * cin, cout], -0.5, 0.5));
    s.insert("m.bias", random_tensor(rng, &[cout], -0.2, 0.2));
    init_batch_norm(&mut s, "m.bn", cout);
    s.insert("m.bn.gamma", random_tensor(rng, &[cout], 0.5, 1.5));
    s.insert("m.bn.beta", random_tensor(rng, &[cout], -0.3, 0.3));
    s.set_buffer("m.bn.running_mean", random_tensor(rng, &[cout], -0.2, 0.2)).unwrap();
    s.set_buffer("m.bn.running_var", random_tensor(rng, &[cout], 0.5, 2.0)).unwrap();
    s
}

/// Straightforward per-point evaluation in f64.
pub fn mr_conv_naive(
    store: &ParamStore,
    x: &Tensor,
    query: &[usize],
    neighbors: &[Vec<u32>],
    mode: Mode,
) -> Vec<Vec<f64>> {
    let cin = x.shape()[1];
    let w = store.get("m.weight").unwrap();
    let cout = w.shape()[1];
    let b = store.get("m.bias").unwrap().data();
    let xd = x.data();
    let at = |r: usize, c: usize| xd[r * cin + c] as f64;
    let pre: Vec<Vec<f64>> = query
        .iter()
        .zip(neighbors)
        .map(|(&qi, nb)| {
            let mut feat: Vec<f64> = (0..cin).map(|c| at(qi, c)).collect();
            for c in 0..cin {
                let rel = nb
                    .iter()
                    .map(|&j| at(j as usize, c) - at(qi, c))
                    .fold(f64::NEG_INFINITY, f64::max);
                feat.push(if nb.is_empty() { 0.0 } else { rel });
            }
            (0..cout)
                .map(|o| {
                    let s: f64 = (0..2 * cin).map(|k| feat[k] * w.data()[k * cout + o] as f64).sum();
                    (s + b[o] as f64).max(0.0)
                })
                .collect()
        })
        .collect();
    let n = pre.len() as f64;
    let gamma = store.get("m.bn.gamma").unwrap().data();
    let beta = store.get("m.bn.beta").unwrap().data();
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Eval => (
            store.buffer("m.bn.running_mean").unwrap().data().iter().map(|&v| v as f64).collect(),
            store.buffer("m.bn.running_var").unwrap().data().iter().map(|&v| v as f64).collect(),
        ),
        Mode::Train => (0..cout)
            .map(|o| {
                let m = pre.iter().map(|r| r[o]).sum::<f64>() / n;
                let v = pre.iter().map(|r| (r[o] - m).powi(2)).sum::<f64>() / n;
                (m, v)
            })
            .unzip(),
    };
    pre.iter()
        .map(|r| {
            (0..cout)
                .map(|o| (r[o] - mean[o]) / (var[o] + NORM_EPS as f64).sqrt() * gamma[o] as f64 + beta[o] as f64)
                .collect()
        })
        .collect()
}

pub fn run_mr_conv(store: &ParamStore, x: &Tensor, query: &[usize], graph: &NeighborGraph, mode: Mode) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let p = Binder::new(store);
    let y = mr_conv(&mut tape, &p, "m", xv, Arc::new(query.to_vec()), graph, mode).unwrap();
    tape.value(y).clone()
}

pub fn max_abs_diff(got: &Tensor, want: &[Vec<f64>]) -> f64 {
    let c = got.shape()[1];
    want.iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(o, &v)| (i, o, v)))
        .map(|(i, o, v)| (got.data()[i * c + o] as f64 - v).abs())
        .fold(0.0, f64::max)
}

pub fn three_views(w: usize, h: usize) -> Vec<CameraSpec> {
    let up = [0.0, -1.0, 0.0];
    [[0.0, 0.0, 0.0], [0.3, 0.1, 0.0], [-0.2, -0.15, 0.1]]
        .into_iter()
        .map(|eye| camera(w, h, look_at(eye, [0.0, 0.0, 2.0], up).unwrap()))
        .collect()
}

pub fn scene_points(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(1.6..2.6)])
        .collect()
}

pub fn plans(pts: &[[f64; 3]], cams: &[CameraSpec]) -> Vec<SplatPlan> {
    cams.iter().map(|c| SplatPlan::new(pts, c, 3.0, SOFT_Z_LAMBDA)).collect()
}

pub fn cns_value(images: &[Tensor], plans: &[SplatPlan]) -> (f32, usize) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = images.iter().map(|t| tape.constant(t.clone())).collect();
    let refs: Vec<&SplatPlan> = plans.iter().collect();
    let c = consistency_loss(&mut tape, &vars, &refs).unwrap();
    (tape.value(c.loss).item(), c.triples)
}

/// Clamped bilinear lookup written out per pixel, independent of the library sampler.
pub fn naive_sample(img: &Tensor, ch: usize, u: f64, v: f64) -> f64 {
    let (h, w) = (img.shape()[2], img.shape()[3]);
    let x = (u - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (v - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| img.data()[ch * h * w + yy * w + xx] as f64;
    at(x0, y0) * (1.0 - fx) * (1.0 - fy) + at(x1, y0) * fx * (1.0 - fy) + at(x0, y1) * (1.0 - fx) * fy + at(x1, y1) * fx * fy
}

pub fn naive_cns(images: &[Tensor], plans: &[SplatPlan]) -> (f64, usize, f64) {
    let mut total = 0.0;
    let mut count = 0;
    let mut margin = f64::INFINITY;
    let c = images[0].shape()[1];
    for i in 0..plans.len() {
        for j in 0..plans.len() {
            if i >= j {
                continue;
            }
            for p in 0..plans[i].projected.len() {
                if !(plans[i].visible[p] && plans[j].visible[p]) {
                    continue;
                }
                let [ui, vi, _] = plans[i].projected[p].unwrap();
                let [uj, vj, _] = plans[j].projected[p].unwrap();
                for ch in 0..c {
                    let d = naive_sample(&images[i], ch, ui, vi) - naive_sample(&images[j], ch, uj, vj);
                    total += d.abs();
                    margin = margin.min(d.abs());
                }
                count += 1;
            }
        }
    }
    (if count == 0 { 0.0 } else { total / count as f64 }, count, margin)
}

/// Consistency instance whose sampled colour gaps all stay clear of the L1 kink.
pub fn kink_free_cns_instance(margin: f64) -> (Vec<Tensor>, Vec<SplatPlan>) {
    for seed in 0.. {
        let mut r = rng(1000 + seed);
        let pts = scene_points(&mut r, 40);
        let pl = plans(&pts, &three_views(16, 16));
        let imgs: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, &[1, 3, 16, 16], 0.0, 1.0)).collect();
        let (_, count, m) = naive_cns(&imgs, &pl);
        if count >= 10 && m >= margin {
            return (imgs, pl);
        }
    }
    unreachable!()
}

/// `x` shifted by `±offset` per element.
pub fn offset_target(r: &mut rand_chacha::ChaCha8Rng, x: &Tensor, offset: f32) -> Tensor {
    let data = x.data().iter().map(|&v| v + if r.random_bool(0.5) { offset } else { -offset }).collect();
    Tensor::new(x.shape(), data).unwrap()
}

fn frustum_points(r: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [r.random_range(-0.7..0.7), r.random_range(-0.5..0.5), r.random_range(1.0..3.0)])
        .collect()
}

/// `|⟨R(F), G⟩ − ⟨F, Rᵀ(G)⟩| / max(|⟨R(F), G⟩|, 1)` on random rasterizer instances.
pub fn rasterize_adjoint_gaps(seed: u64, trials: usize) -> Vec<f64> {
    let mut r = rng(seed);
    (0..trials)
        .map(|_| {
            let n = r.random_range(1..200);
            let (w, h) = (r.random_range(1..20), r.random_range(1..20));
            let c = r.random_range(1..6);
            let pts = frustum_points(&mut r, n);
            let cam = camera(w, h, stylepoint::camera::IDENTITY_POSE);
            let plan = SplatPlan::new(&pts, &cam, 3.5, SOFT_Z_LAMBDA);
            let f = random_tensor(&mut r, &[n, c], -1.0, 1.0).with_requires_grad(true);
            let g = random_tensor(&mut r, &[1, c, h, w], -1.0, 1.0);
            let mut tape = Tape::new();
            let fv = tape.leaf(f.clone());
            let y = rasterize(&mut tape, &plan, fv).unwrap();
            let gv = tape.constant(g.clone());
            let prod = tape.mul(y, gv).unwrap();
            let loss = tape.sum(prod);
            let grads = tape.backward(loss).unwrap();
            let lhs = tape.value(y).dot(&g);
            let rhs = f.dot(grads.wrt(fv).unwrap());
            (lhs - rhs).abs() / lhs.abs().max(1.0)
        })
        .collect()
}

pub fn random_pose(rng: &mut ChaCha8Rng) -> [[f64; 4]; 3] {
    let eye = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let target = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 4.0];
    look_at(eye, target, [0.0, -1.0, 0.0]).unwrap()
}

/// Normalizes `n` random in-frustum points: whether all land in `[-1, 1]³`,
/// and the worst relative error after denormalizing.
pub fn ndc_round_trip(seed: u64, n: usize) -> (bool, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = CameraSpec::new(55.0, 60.0, 31.0, 29.5, 64, 60, random_pose(&mut rng)).unwrap();
    let (near, far) = (0.7, 9.0);
    let mut pts = WorldPoints::default();
    for _ in 0..n {
        let u = rng.random_range(0.0..64.0);
        let v = rng.random_range(0.0..60.0);
        let z = rng.random_range(near..=far);
        pts.positions.push(cam.camera_to_world(cam.unproject_camera(u, v, z)));
        pts.colors.push([0.0; 3]);
        pts.sources.push(PointSource { view: 0, pixel: 0, layer: 0 });
    }
    let cloud = normalize_ndc(&pts, &cam, near, far).unwrap();
    let inside = cloud.positions.iter().flatten().all(|v| (-1.0..=1.0).contains(v));
    let mut worst = 0f64;
    for (p, w) in cloud.positions.iter().zip(&pts.positions) {
        let back = denormalize(*p, &cloud.record).unwrap();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let err = (0..3).map(|k| (back[k] - w[k]).powi(2)).sum::<f64>().sqrt();
        worst = worst.max(err / norm);
    }
    (inside, worst)
}
