mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use stylepoint::camera::{look_at, CameraSpec, ScenePointCloud};
use stylepoint::error::Error;
use stylepoint::eval::*;
use stylepoint::image::RgbImage;
use stylepoint::model::Pyramid;
use stylepoint::render::{SplatPlan, SOFT_Z_LAMBDA};
use stylepoint::synth::{perturb, SyntheticScene};

fn world(cloud: &ScenePointCloud) -> Vec<[f64; 3]> {
    (0..cloud.len()).map(|i| cloud.world_position(i).unwrap()).collect()
}

fn plan(cloud: &ScenePointCloud, pts: &[[f64; 3]], cam: &CameraSpec) -> SplatPlan {
    SplatPlan::new(pts, cam, cloud.record.far, SOFT_Z_LAMBDA)
}

/// Small sideways orbit around the canonical view.
fn trajectory(canonical: &CameraSpec, n: usize, radius: f64) -> Vec<CameraSpec> {
    (0..n)
        .map(|k| {
            let t = k as f64 / n as f64 * std::f64::consts::TAU;
            perturb(canonical, [radius * t.sin(), 0.3 * radius * t.cos(), 0.0], [0.0, 1.0, 0.0], 0.0).unwrap()
        })
        .collect()
}

fn noisy(img: &RgbImage, sigma: f32, seed: u64) -> RgbImage {
    let mut r = rng(seed);
    let mut out = img.clone();
    for v in &mut out.data {
        *v = (*v + sigma * r.random_range(-1.0f32..1.0)).clamp(0.0, 1.0);
    }
    out
}

struct Fixture {
    frames: Vec<RgbImage>,
    plans: Vec<SplatPlan>,
}

fn ground_truth(scene_index: usize, n: usize, size: usize) -> Fixture {
    let scene = SyntheticScene::preset(scene_index, size, size).unwrap();
    let cloud = scene.point_cloud().unwrap();
    let pts = world(&cloud);
    let cams = trajectory(&scene.canonical, n, 0.08);
    Fixture {
        frames: cams.iter().map(|c| scene.render(c).unwrap().0).collect(),
        plans: cams.iter().map(|c| plan(&cloud, &pts, c)).collect(),
    }
}

#[test]
fn identity_warp_is_exact() {
    let fx = ground_truth(0, 1, 32);
    let w = warp(&fx.frames[0], &fx.plans[0], &fx.plans[0], (0, 0)).unwrap();
    assert!(w.count() > 500);
    for (i, &m) in w.mask.iter().enumerate() {
        if m {
            assert_eq!(w.image.data[i * 3..i * 3 + 3], fx.frames[0].data[i * 3..i * 3 + 3]);
        }
    }
    assert_eq!(masked_rmse(&w.image, &fx.frames[0], &w.mask).unwrap(), 0.0);
    let pyr = Pyramid::new(0);
    assert_eq!(masked_feature_distance(&pyr, &w.image, &fx.frames[0], &w.mask).unwrap(), 0.0);
}

#[test]
fn static_trajectory_scores_zero() {
    let fx = ground_truth(1, 1, 32);
    let frames = vec![fx.frames[0].clone(); 9];
    let plans = vec![fx.plans[0].clone(); 9];
    let rep = consistency_report(&Pyramid::new(0), &frames, &plans).unwrap();
    assert_eq!(rep.pairs.len(), 8 + 2);
    assert!(rep.skipped.is_empty());
    for s in [&rep.short_range, &rep.long_range] {
        assert_eq!(s.mean_rmse, Some(0.0));
        assert_eq!(s.mean_feature_distance, Some(0.0));
    }
}

#[test]
fn single_point_lands_on_one_pixel() {
    let a = CameraSpec::new(8.0, 8.0, 4.0, 4.0, 8, 8, look_at([0.0; 3], [0.0, 0.0, 2.0], [0.0, -1.0, 0.0]).unwrap()).unwrap();
    let b = CameraSpec::new(8.0, 8.0, 4.0, 4.0, 8, 8, look_at([0.3, 0.0, 0.0], [0.0, 0.0, 2.0], [0.0, -1.0, 0.0]).unwrap()).unwrap();
    let p = [0.1, -0.05, 2.0];
    let (pa, pb) = (SplatPlan::new(&[p], &a, 3.0, SOFT_Z_LAMBDA), SplatPlan::new(&[p], &b, 3.0, SOFT_Z_LAMBDA));
    let src = RgbImage::from_fn(8, 8, |x, y| [x as f32 / 8.0, y as f32 / 8.0, 0.5]);
    let w = warp(&src, &pa, &pb, (0, 1)).unwrap();
    assert_eq!(w.count(), 1);
    let dst = pb.pixel_of(0).unwrap();
    assert!(w.mask[dst]);
    let s = pa.pixel_of(0).unwrap();
    assert_eq!(w.image.pixel(dst % 8, dst / 8), src.pixel(s % 8, s / 8));
}

#[test]
fn warp_reports_empty_covisibility() {
    let cam = |eye: [f64; 3], target: [f64; 3]| {
        CameraSpec::new(8.0, 8.0, 4.0, 4.0, 8, 8, look_at(eye, target, [0.0, -1.0, 0.0]).unwrap()).unwrap()
    };
    let pts = [[0.0, 0.0, 2.0]];
    let a = SplatPlan::new(&pts, &cam([0.0; 3], [0.0, 0.0, 2.0]), 3.0, SOFT_Z_LAMBDA);
    let b = SplatPlan::new(&pts, &cam([0.0; 3], [0.0, 0.0, -2.0]), 3.0, SOFT_Z_LAMBDA);
    let img = RgbImage::filled(8, 8, [0.5; 3]);
    assert!(matches!(warp(&img, &a, &b, (3, 4)), Err(Error::EmptyCovisibility(3, 4))));
    let rep = consistency_report(&Pyramid::new(0), &[img.clone(), img], &[a, b]).unwrap();
    assert_eq!(rep.pairs.len(), 0);
    assert_eq!(rep.skipped.len(), 1);
    assert_eq!(rep.short_range.mean_rmse, None);
}

/// Preset geometry with textures slowed down until one pixel spans well under a grey level.
fn smooth_scene(index: usize, size: usize) -> SyntheticScene {
    let mut scene = SyntheticScene::preset(index, size, size).unwrap();
    for b in scene.boxes.iter_mut().chain([&mut scene.room]) {
        for w in &mut b.texture.waves {
            w.freq = w.freq.map(|f| f * 0.25);
        }
    }
    scene
}

fn smooth_fixture(index: usize, n: usize, size: usize) -> Fixture {
    let scene = smooth_scene(index, size);
    let cloud = scene.point_cloud().unwrap();
    let pts = world(&cloud);
    let cams = trajectory(&scene.canonical, n, 0.08);
    Fixture {
        frames: cams.iter().map(|c| scene.render(c).unwrap().0).collect(),
        plans: cams.iter().map(|c| plan(&cloud, &pts, c)).collect(),
    }
}

/// Pixels within one step of a break in surface planarity. Inverse depth is
/// affine in pixel coordinates on a plane, so its second difference vanishes
/// everywhere except across silhouettes and creases, where a pixel-centre ray
/// can hit a different surface than any point landing on the pixel.
fn silhouettes(depth: &[f32], w: usize, h: usize) -> Vec<bool> {
    let inv = |x: usize, y: usize| 1.0 / depth[y * w + x] as f64;
    let mut kink = vec![false; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = inv(x, y);
            let dx = inv(x - 1, y) + inv(x + 1, y) - 2.0 * c;
            let dy = inv(x, y - 1) + inv(x, y + 1) - 2.0 * c;
            kink[y * w + x] = dx.abs().max(dy.abs()) > 1e-3 * c;
        }
    }
    (0..w * h)
        .map(|k| {
            let (x, y) = (k % w, k / w);
            (y.saturating_sub(1)..(y + 2).min(h)).any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| kink[yy * w + xx]))
        })
        .collect()
}

#[test]
fn warp_matches_rerender_of_target_view() {
    let size = 128;
    for s in 0..3 {
        let scene = smooth_scene(s, size);
        let cloud = scene.point_cloud().unwrap();
        let pts = world(&cloud);
        let cams = trajectory(&scene.canonical, 8, 0.08);
        let renders: Vec<_> = cams.iter().map(|c| scene.render(c).unwrap()).collect();
        let plans: Vec<SplatPlan> = cams.iter().map(|c| plan(&cloud, &pts, c)).collect();
        for (i, j, _) in trajectory_pairs(8) {
            let w = warp(&renders[i].0, &plans[i], &plans[j], (i, j)).unwrap();
            assert!(w.count() > size * size / 4);
            let edge = silhouettes(&renders[j].1.values, size, size);
            let interior: Vec<bool> = w.mask.iter().zip(&edge).map(|(&m, &e)| m && !e).collect();
            let kept = interior.iter().filter(|&&m| m).count();
            assert!(kept as f64 >= 0.8 * w.count() as f64, "scene {s} pair ({i}, {j}): {kept} of {}", w.count());
            for k in (0..size * size).filter(|&k| interior[k]) {
                for c in 0..3 {
                    let d = (w.image.data[k * 3 + c] - renders[j].0.data[k * 3 + c]).abs();
                    assert!(d <= 2.0 / 255.0, "scene {s} pair ({i}, {j}) pixel {k}: {d}");
                }
            }
        }
    }
}

#[test]
fn pair_rmse_is_symmetric_under_swap() {
    let fx = smooth_fixture(1, 8, 96);
    let shifted: Vec<RgbImage> = fx
        .frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let mut g = f.clone();
            g.data.iter_mut().for_each(|v| *v = (*v + 0.03 * (k % 3) as f32).min(1.0));
            g
        })
        .collect();
    for (i, j, _) in trajectory_pairs(8) {
        let fwd = warp(&shifted[i], &fx.plans[i], &fx.plans[j], (i, j)).unwrap();
        let bwd = warp(&shifted[j], &fx.plans[j], &fx.plans[i], (j, i)).unwrap();
        let a = masked_rmse(&fwd.image, &shifted[j], &fwd.mask).unwrap();
        let b = masked_rmse(&bwd.image, &shifted[i], &bwd.mask).unwrap();
        assert!((a - b).abs() <= 2.0 / 255.0, "({i}, {j}): {a} vs {b}");
    }
}

#[test]
fn rmse_grows_with_noise() {
    let fx = ground_truth(2, 2, 32);
    let w = warp(&fx.frames[0], &fx.plans[0], &fx.plans[1], (0, 1)).unwrap();
    let pyr = Pyramid::new(0);
    let mut last = (-1.0, -1.0);
    for sigma in [0.0, 0.05, 0.1, 0.2] {
        let target = noisy(&fx.frames[1], sigma, 5);
        let r = masked_rmse(&w.image, &target, &w.mask).unwrap();
        let f = masked_feature_distance(&pyr, &w.image, &target, &w.mask).unwrap();
        assert!(r > last.0 && f > last.1, "sigma {sigma}: {r} {f} after {last:?}");
        last = (r, f);
    }
}

#[test]
fn feature_distance_ignores_unmasked_content() {
    let fx = ground_truth(0, 2, 32);
    let w = warp(&fx.frames[0], &fx.plans[0], &fx.plans[1], (0, 1)).unwrap();
    let pyr = Pyramid::new(0);
    let base = masked_feature_distance(&pyr, &w.image, &fx.frames[1], &w.mask).unwrap();
    let mut scribbled = w.image.clone();
    for (i, &m) in w.mask.iter().enumerate() {
        if !m {
            scribbled.data[i * 3..i * 3 + 3].copy_from_slice(&[1.0, 0.0, 1.0]);
        }
    }
    assert_eq!(masked_feature_distance(&pyr, &scribbled, &fx.frames[1], &w.mask).unwrap(), base);
    assert!(matches!(
        masked_feature_distance(&pyr, &w.image, &fx.frames[1], &vec![false; w.mask.len()]),
        Err(Error::EmptyMask)
    ));
}

#[test]
fn report_means_match_pairs() {
    let fx = ground_truth(1, 9, 32);
    let frames: Vec<RgbImage> = fx.frames.iter().enumerate().map(|(k, f)| noisy(f, 0.05, k as u64)).collect();
    let rep = consistency_report(&Pyramid::new(0), &frames, &fx.plans).unwrap();
    for (kind, s) in [(PairKind::Short, &rep.short_range), (PairKind::Long, &rep.long_range)] {
        let ps: Vec<&PairMetrics> = rep.pairs.iter().filter(|p| p.kind == kind).collect();
        assert_eq!(s.pairs, ps.len());
        let mean = ps.iter().map(|p| p.rmse).sum::<f64>() / ps.len() as f64;
        assert!((s.mean_rmse.unwrap() - mean).abs() < 1e-12);
    }
    assert_eq!(rep.long_range.pairs, 2);
}

#[test]
fn report_golden() {
    let fx = ground_truth(0, 9, 32);
    let frames: Vec<RgbImage> = fx.frames.iter().enumerate().map(|(k, f)| noisy(f, 0.1, 40 + k as u64)).collect();
    let rep = consistency_report(&Pyramid::new(0), &frames, &fx.plans).unwrap();
    let got = [rep.short_range.mean_rmse.unwrap(), rep.long_range.mean_feature_distance.unwrap()];
    assert_golden("consistency report", got, [0.08416678508384745, 0.01953441414647565]);
}

#[test]
fn report_serialises_to_schema() {
    let fx = ground_truth(2, 9, 32);
    let rep = consistency_report(&Pyramid::new(0), &fx.frames, &fx.plans).unwrap();
    let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let json: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
    assert!(validator.is_valid(&json));
    let mut broken = json.clone();
    broken["pairs"][0]["kind"] = "sideways".into();
    assert!(!validator.is_valid(&broken));

    let dir = tempfile::tempdir().unwrap();
    rep.write_json(dir.path().join("r.json")).unwrap();
    let back: ConsistencyReport = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(back, rep);
    rep.write_csv(dir.path().join("r.csv")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(csv.starts_with("source,target,kind,rmse,feature_distance,covisible_pixels\n"));
    assert_eq!(csv.lines().count(), rep.pairs.len() + 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn warp_writes_only_masked_pixels(seed in 0u64..1000, dx in -0.3f64..0.3, dy in -0.3f64..0.3) {
        let mut r = rng(seed);
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|_| [r.random_range(-0.6..0.6), r.random_range(-0.6..0.6), r.random_range(1.5..2.5)])
            .collect();
        let up = [0.0, -1.0, 0.0];
        let a = CameraSpec::new(12.0, 12.0, 8.0, 6.0, 16, 12, look_at([0.0; 3], [0.0, 0.0, 2.0], up).unwrap()).unwrap();
        let b = CameraSpec::new(12.0, 12.0, 8.0, 6.0, 16, 12, look_at([dx, dy, 0.0], [0.0, 0.0, 2.0], up).unwrap()).unwrap();
        let (pa, pb) = (SplatPlan::new(&pts, &a, 3.0, SOFT_Z_LAMBDA), SplatPlan::new(&pts, &b, 3.0, SOFT_Z_LAMBDA));
        let src = RgbImage::from_fn(16, 12, |x, y| [0.1 + x as f32 / 20.0, 0.2 + y as f32 / 20.0, 0.9]);
        let w = warp(&src, &pa, &pb, (0, 1)).unwrap();
        for (i, &m) in w.mask.iter().enumerate() {
            let px = &w.image.data[i * 3..i * 3 + 3];
            if m {
                prop_assert!(px[2] == 0.9);
            } else {
                prop_assert!(px == [0.0; 3]);
            }
            prop_assert!(!m || pb.coverage[i]);
        }
        let rmse = masked_rmse(&w.image, &src, &w.mask).unwrap();
        prop_assert!(rmse >= 0.0 && rmse.is_finite());
    }
}
