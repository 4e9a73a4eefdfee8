#![allow(dead_code)]
pub mod oracles;
pub mod gradients;


use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylepoint::tensor::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero by `margin`, for testing across kinks.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(margin..hi);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn projected(y: &Tensor, r: &[f32]) -> f64 {
    y.data().iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Norm-wise relative error between analytic gradients and central differences.
///
/// The output is projected onto a fixed random vector (in f64) to form a scalar.
/// Returns the worst relative error over all inputs.
pub fn fd_check(
    inputs: &[Tensor],
    h: f32,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    fd_check_stencil(inputs, h, false, f)
}

/// [`fd_check`] with the five-point stencil, for deep f32 chains where a
/// larger step is needed to rise above forward rounding.
pub fn fd_check5(
    inputs: &[Tensor],
    h: f32,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    fd_check_stencil(inputs, h, true, f)
}

fn fd_check_stencil(
    inputs: &[Tensor],
    h: f32,
    five: bool,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let y = f(&mut tape, &vars);
    let shape = tape.shape(y).to_vec();
    let mut prng = rng(0xFD);
    let r = random_tensor(&mut prng, &shape, -1.0, 1.0);
    let rv = tape.constant(r.clone());
    let prod = tape.mul(y, rv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&mut t, &vs);
        projected(t.value(y), r.data())
    };

    let mut worst = 0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[k])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut num = vec![0f64; input.numel()];
        for i in 0..input.numel() {
            let at = |step: f32| {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[i] += step;
                eval(&xs)
            };
            let h64 = h as f64;
            num[i] = if five {
                (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h64)
            } else {
                (at(h) - at(-h)) / (2.0 * h64)
            };
        }
        let diff: f64 = analytic
            .iter()
            .zip(&num)
            .map(|(&a, &n)| (a as f64 - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = num.iter().map(|n| n * n).sum::<f64>().sqrt();
        worst = worst.max(if norm > 1e-6 { diff / norm } else { diff });
    }
    worst
}

/// Directional central differences on a scalar-valued computation.
///
/// Perturbs every input along random ±1 directions and compares `(f(x+hd) − f(x−hd)) / 2h`
/// with `⟨∇f, d⟩`. Returns the worst relative error over `directions` trials.
pub fn directional_check(
    inputs: &[Tensor],
    h: f32,
    directions: usize,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let y = f(&mut t, &vs);
        t.value(y).item() as f64
    };
    let mut prng = rng(0xD1);
    let mut worst = 0f64;
    for _ in 0..directions {
        let dirs: Vec<Vec<f32>> = inputs
            .iter()
            .map(|t| {
                (0..t.numel())
                    .map(|_| if prng.random_bool(0.5) { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect();
        let analytic: f64 = vars
            .iter()
            .zip(&dirs)
            .map(|(v, d)| {
                grads.wrt(*v).map_or(0.0, |g| {
                    g.data().iter().zip(d).map(|(&a, &b)| a as f64 * b as f64).sum()
                })
            })
            .sum();
        let shifted = |sign: f32| -> Vec<Tensor> {
            inputs
                .iter()
                .zip(&dirs)
                .map(|(t, d)| {
                    let data = t.data().iter().zip(d).map(|(&x, &di)| x + sign * h * di).collect();
                    Tensor::new(t.shape(), data).unwrap()
                })
                .collect()
        };
        let num = (eval(&shifted(1.0)) - eval(&shifted(-1.0))) / (2.0 * h as f64);
        let rel = (analytic - num).abs() / num.abs().max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

use stylepoint::camera::{CameraSpec, NdcRecord, PointSource, ScenePointCloud, IDENTITY_POSE};
use stylepoint::tensor::ParamStore;

/// Uniform random NDC cloud inside `[-0.9, 0.9]³` with random colours.
pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> ScenePointCloud {
    let cam = CameraSpec::new(32.0, 32.0, 16.0, 16.0, 32, 32, IDENTITY_POSE).unwrap();
    let mut coord = || rng.random_range(-0.9f32..0.9);
    let positions: Vec<[f32; 3]> = (0..n).map(|_| [coord(), coord(), coord()]).collect();
    let colors: Vec<[f32; 3]> = (0..n).map(|_| [coord() * 0.5 + 0.5, coord() * 0.5 + 0.5, coord() * 0.5 + 0.5]).collect();
    ScenePointCloud {
        positions,
        colors,
        sources: (0..n as u32).map(|i| PointSource { view: 0, pixel: i, layer: 0 }).collect(),
        record: NdcRecord::new(cam, 1.0, 4.0).unwrap(),
    }
}

/// Five-point central-difference check of parameter gradients for a computation bound to `store`.
///
/// `f` builds a scalar from the store. Returns `(name, relative error, skipped fraction)`
/// for every parameter. Coordinates whose stencil straddles a kink (the tape's branch
/// signature changes) are skipped. The denominator is floored at 1 so parameters with an
/// identically zero gradient compare against an absolute error.
pub fn param_fd(
    store: &ParamStore,
    h: f32,
    f: impl Fn(&mut Tape, &ParamStore) -> Var,
) -> Vec<(String, f64, f64)> {
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    let grads = tape.backward(loss).unwrap();
    let base = tape.branch_signature();
    let eval = |s: &ParamStore| -> Option<f64> {
        let mut t = Tape::new();
        let y = f(&mut t, s);
        (t.branch_signature() == base).then(|| t.value(y).item() as f64)
    };
    let names: Vec<String> = store.params().map(|(k, _)| k.clone()).collect();
    names
        .into_iter()
        .map(|name| {
            let n = store.get(&name).unwrap().numel();
            let analytic = grads
                .param(&name)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; n]);
            let mut diff = 0f64;
            let mut norm = 0f64;
            let mut skipped = 0;
            for i in 0..n {
                let at = |step: f32| {
                    let mut s = store.clone();
                    s.get_mut(&name).unwrap().data_mut()[i] += step;
                    eval(&s)
                };
                let (Some(p1), Some(m1), Some(p2), Some(m2)) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h)) else {
                    skipped += 1;
                    continue;
                };
                let num = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h as f64);
                diff += (analytic[i] as f64 - num).powi(2);
                norm += num * num;
            }
            let (diff, norm) = (diff.sqrt(), norm.sqrt());
            (name, diff / norm.max(1.0), skipped as f64 / n as f64)
        })
        .collect()
}

/// Order-sensitive checksum: plain sum and an index-weighted sum.
pub fn checksum(t: &Tensor) -> [f64; 2] {
    let d = t.data();
    let plain = d.iter().map(|&v| v as f64).sum();
    let weighted = d.iter().enumerate().map(|(i, &v)| v as f64 * ((i % 97) as f64 + 1.0)).sum();
    [plain, weighted]
}

pub fn assert_golden(name: &str, got: [f64; 2], want: [f64; 2]) {
    for k in 0..2 {
        let tol = 1e-4 * want[k].abs().max(1.0);
        assert!(
            (got[k] - want[k]).abs() <= tol,
            "{name} checksum drifted: got {got:?}, want {want:?}"
        );
    }
}

/// Per-coordinate central differences that skip coordinates whose `±h` step
/// crosses a kink (the tape's branch signature changes), so the oracle only
/// compares inside one smooth piece.
///
/// Returns the norm-wise relative error and the fraction of skipped coordinates.
pub fn fd_check_piecewise(
    inputs: &[Tensor],
    h: f32,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
) -> (f64, f64) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let y = f(&mut tape, &vars);
    let shape = tape.shape(y).to_vec();
    let r = random_tensor(&mut rng(0xFD), &shape, -1.0, 1.0);
    let rv = tape.constant(r.clone());
    let prod = tape.mul(y, rv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    let base = tape.branch_signature();

    let eval = |xs: &[Tensor]| -> (f64, Vec<u32>) {
        let mut t = Tape::new();
        // Leaves that require grad so the tape keeps every op for the signature.
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone().with_requires_grad(true))).collect();
        let y = f(&mut t, &vs);
        (projected(t.value(y), r.data()), t.branch_signature())
    };
    let (mut diff, mut norm) = (0f64, 0f64);
    let (mut skipped, mut total) = (0usize, 0usize);
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[k])
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for i in 0..input.numel() {
            total += 1;
            let at = |step: f32| {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[i] += step;
                eval(&xs)
            };
            let ((plus, sp), (minus, sm)) = (at(h), at(-h));
            if sp != base || sm != base {
                skipped += 1;
                continue;
            }
            let num = (plus - minus) / (2.0 * h as f64);
            diff += (analytic[i] as f64 - num).powi(2);
            norm += num * num;
        }
    }
    let (diff, norm) = (diff.sqrt(), norm.sqrt());
    (if norm > 1e-6 { diff / norm } else { diff }, skipped as f64 / total as f64)
}
