//! Deterministic parameter initialisation keyed by (seed, parameter path).

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

/// Uniform in `±sqrt(6 / fan_in)` (He initialisation for ReLU layers).
pub fn he_uniform(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    uniform(seed, name, shape, bound)
}

pub fn uniform(seed: u64, name: &str, shape: &[usize], bound: f32) -> Tensor {
    let mut rng = rng_for(seed, name);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

/// (Semi-)orthogonal `rows × cols` matrix scaled by `gain`, reshaped to `shape`.
pub fn orthogonal(seed: u64, name: &str, shape: &[usize], gain: f64) -> Tensor {
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    let mut rng = rng_for(seed, name);
    let (r, c) = if rows < cols { (cols, rows) } else { (rows, cols) };
    let g = DMatrix::<f64>::from_fn(r, c, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    // Sign fix makes the factorisation unique.
    let rdiag = qr.r().diagonal();
    for j in 0..c {
        if rdiag[j] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let m = if rows < cols { q.transpose() } else { q };
    let data = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| (gain * m[(i, j)]) as f32)
        .collect();
    Tensor::new(shape, data).expect("shape")
}
