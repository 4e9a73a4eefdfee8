//! Farthest point sampling, ball queries and inverse-distance interpolation.
//!
//! All distances are Euclidean, evaluated in f64 from the f32 coordinates.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::SparseMap;

pub type Point = [f32; 3];

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleIndex {
    pub indices: Vec<usize>,
    /// Distance from each selected point to the previously selected set (0 for the seed).
    pub distances: Vec<f64>,
}

/// Index of the point nearest the centroid, lowest index on ties.
pub fn centroid_seed(points: &[Point]) -> usize {
    let n = points.len() as f64;
    let mut c = [0f64; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k] as f64;
        }
    }
    let c = c.map(|v| v / n);
    let mut best = (f64::INFINITY, 0);
    for (i, p) in points.iter().enumerate() {
        let d: f64 = (0..3).map(|k| (p[k] as f64 - c[k]).powi(2)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Greedy max-min subsampling seeded at the point nearest the centroid.
pub fn farthest_point_sample(points: &[Point], m: usize) -> Result<SampleIndex> {
    if m == 0 || m > points.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {m} of {} points",
            points.len()
        )));
    }
    let seed = centroid_seed(points);
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut taken = vec![false; points.len()];
    let mut indices = Vec::with_capacity(m);
    let mut distances = Vec::with_capacity(m);
    let (mut cur, mut cur_d) = (seed, 0.0);
    loop {
        indices.push(cur);
        distances.push(cur_d);
        taken[cur] = true;
        if indices.len() == m {
            break;
        }
        let c = points[cur];
        let mut best = (-1.0, usize::MAX);
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best.0 {
                best = (min_d[i], i);
            }
        }
        cur = best.1;
        cur_d = best.0.sqrt();
    }
    Ok(SampleIndex { indices, distances })
}

/// Fixed-radius neighbourhoods, capped at `k` per query.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    pub neighbors: Vec<Vec<u32>>,
    pub radius: f32,
    pub k: usize,
}

fn check_ball_args(r: f32, k: usize) -> Result<()> {
    if !(r > 0.0 && r.is_finite()) || k == 0 {
        return Err(Error::InvalidArgument(format!("ball query needs r > 0 and K >= 1, got r={r} K={k}")));
    }
    Ok(())
}

/// Reference O(MN) ball query: all sources within `r`, lowest indices first, truncated to `k`.
pub fn ball_query_brute(queries: &[Point], source: &[Point], r: f32, k: usize) -> Result<NeighborGraph> {
    check_ball_args(r, k)?;
    let r2 = r as f64 * r as f64;
    let neighbors = queries
        .par_iter()
        .map(|q| {
            source
                .iter()
                .enumerate()
                .filter(|(_, s)| dist2(q, s) <= r2)
                .map(|(j, _)| j as u32)
                .take(k)
                .collect()
        })
        .collect();
    Ok(NeighborGraph { neighbors, radius: r, k })
}

/// Uniform-grid ball query with cell size `r`; same membership and order as [`ball_query_brute`].
pub fn ball_query(queries: &[Point], source: &[Point], r: f32, k: usize) -> Result<NeighborGraph> {
    check_ball_args(r, k)?;
    let cell = r as f64;
    let key = |v: f64| (v / cell).floor() as i64;
    let mut grid: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
    for (j, s) in source.iter().enumerate() {
        grid.entry(s.map(|v| key(v as f64))).or_default().push(j as u32);
    }
    let r2 = r as f64 * r as f64;
    // Margins absorb rounding in the cell arithmetic; the distance test decides membership.
    let lo = |v: f64| ((v - cell) / cell - 1e-6).floor() as i64;
    let hi = |v: f64| ((v + cell) / cell + 1e-6).floor() as i64;
    let neighbors = queries
        .par_iter()
        .map(|q| {
            let qd = q.map(|v| v as f64);
            let mut found = Vec::new();
            for x in lo(qd[0])..=hi(qd[0]) {
                for y in lo(qd[1])..=hi(qd[1]) {
                    for z in lo(qd[2])..=hi(qd[2]) {
                        if let Some(bucket) = grid.get(&[x, y, z]) {
                            found.extend(bucket.iter().copied().filter(|&j| dist2(q, &source[j as usize]) <= r2));
                        }
                    }
                }
            }
            found.sort_unstable();
            found.truncate(k);
            found
        })
        .collect();
    Ok(NeighborGraph { neighbors, radius: r, k })
}

pub const IDW_DELTA: f64 = 1e-8;

/// Interpolation weights from the `k` nearest sources (ties by lowest index), rows normalised.
///
/// A target within `IDW_DELTA` of a source copies that source exactly.
pub fn idw_weights(targets: &[Point], source: &[Point], k: usize, power: f64) -> Result<SparseMap> {
    if source.is_empty() || k == 0 {
        return Err(Error::InvalidArgument("idw needs at least one source and k >= 1".into()));
    }
    let k = k.min(source.len());
    let rows: Vec<Vec<(usize, f32)>> = targets
        .par_iter()
        .map(|t| {
            let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
            for (j, s) in source.iter().enumerate() {
                let d = dist2(t, s);
                if best.len() == k && d >= best[k - 1].0 {
                    continue;
                }
                let pos = best.partition_point(|&(bd, _)| bd <= d);
                best.insert(pos, (d, j));
                best.truncate(k);
            }
            let (d0, j0) = best[0];
            if d0.sqrt() < IDW_DELTA {
                return vec![(j0, 1.0)];
            }
            let w: Vec<f64> = best.iter().map(|&(d, _)| 1.0 / d.sqrt().max(IDW_DELTA).powf(power)).collect();
            let total: f64 = w.iter().sum();
            best.iter().zip(&w).map(|(&(_, j), &wi)| (j, (wi / total) as f32)).collect()
        })
        .collect();
    let mut map = SparseMap::new(source.len());
    for row in rows {
        map.push_row(row);
    }
    Ok(map)
}

/// `features` is `N × C` row-major; returns `M × C`.
pub fn idw_interpolate(
    targets: &[Point],
    source: &[Point],
    features: &[f32],
    channels: usize,
    k: usize,
    power: f64,
) -> Result<Vec<f32>> {
    if features.len() != source.len() * channels {
        return Err(Error::shape("idw_interpolate", &[source.len(), channels], &[features.len()]));
    }
    Ok(idw_weights(targets, source, k, power)?.apply(features, channels))
}
