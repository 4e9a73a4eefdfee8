//! Hierarchical max-relative graph convolution over the scene cloud.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::init::he_uniform;
use super::layers::{batch_norm, init_batch_norm, linear, Binder, Mode};
use crate::camera::ScenePointCloud;
use crate::error::{Error, Result};
use crate::pointcloud::{ball_query, farthest_point_sample, NeighborGraph, Point};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const INPUT_CHANNELS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub layers: usize,
    pub channels: usize,
    pub downsample: usize,
    pub radius: f32,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stages: Vec<StageConfig>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let stage = |layers, channels, radius| StageConfig {
            layers,
            channels,
            downsample: 4,
            radius,
            k: 16,
        };
        Self {
            stages: vec![stage(1, 64, 0.06), stage(2, 128, 0.12), stage(2, 256, 0.24)],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("encoder needs at least one stage".into());
        }
        let mut prev = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if s.layers == 0 || s.downsample == 0 || s.k == 0 || !(s.radius > 0.0) {
                return bad(format!("stage {i}: layers, downsample, k and radius must be positive"));
            }
            if s.channels <= prev {
                return bad(format!("stage {i}: channels must increase strictly"));
            }
            prev = s.channels;
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(INPUT_CHANNELS, |s| s.channels)
    }

    /// Smallest cloud that leaves at least one point per downsampling.
    pub fn min_points(&self) -> usize {
        self.stages.iter().map(|s| s.downsample).product()
    }

    /// Point counts after each stage.
    pub fn level_sizes(&self, n: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.stages.len());
        let mut cur = n;
        for s in &self.stages {
            cur = cur.div_ceil(s.downsample);
            sizes.push(cur);
        }
        sizes
    }
}

/// Subsampling and neighbourhoods for one stage; fixed for a given cloud.
#[derive(Clone, Debug)]
pub struct StageGeometry {
    /// Indices into the previous level.
    pub sample: Arc<Vec<usize>>,
    pub positions: Vec<Point>,
    /// Queries are the sampled points, sources the previous level.
    pub down: NeighborGraph,
    /// Sampled points against themselves, used by layers after the first.
    pub within: Option<NeighborGraph>,
    /// Indices into the full cloud.
    pub lineage: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct EncoderGeometry {
    pub stages: Vec<StageGeometry>,
}

impl EncoderGeometry {
    pub fn build(positions: &[Point], cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        if positions.len() < cfg.min_points() {
            return Err(Error::CloudTooSmall {
                got: positions.len(),
                need: cfg.min_points(),
            });
        }
        let mut prev_pos = positions.to_vec();
        let mut prev_lineage: Vec<usize> = (0..positions.len()).collect();
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for s in &cfg.stages {
            let m = prev_pos.len().div_ceil(s.downsample);
            let sample = farthest_point_sample(&prev_pos, m)?.indices;
            let pos: Vec<Point> = sample.iter().map(|&i| prev_pos[i]).collect();
            let down = ball_query(&pos, &prev_pos, s.radius, s.k)?;
            let within = (s.layers > 1).then(|| ball_query(&pos, &pos, s.radius, s.k)).transpose()?;
            let lineage: Vec<usize> = sample.iter().map(|&i| prev_lineage[i]).collect();
            prev_pos = pos.clone();
            prev_lineage = lineage.clone();
            stages.push(StageGeometry {
                sample: Arc::new(sample),
                positions: pos,
                down,
                within,
                lineage,
            });
        }
        Ok(Self { stages })
    }

    pub fn output_positions(&self) -> &[Point] {
        &self.stages.last().expect("at least one stage").positions
    }

    pub fn output_lineage(&self) -> &[usize] {
        &self.stages.last().expect("at least one stage").lineage
    }
}

/// Subsampled positions, point-wise content features and their full-cloud lineage.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentFeatures {
    pub positions: Vec<Point>,
    pub features: Tensor,
    pub lineage: Vec<usize>,
}

pub fn init_encoder(store: &mut ParamStore, cfg: &EncoderConfig, seed: u64) {
    let mut cin = INPUT_CHANNELS;
    for (si, s) in cfg.stages.iter().enumerate() {
        let stage_in = cin;
        for l in 0..s.layers {
            let prefix = format!("encoder.stage{si}.layer{l}");
            let name = format!("{prefix}.weight");
            store.insert(&name, he_uniform(seed, &name, &[2 * cin, s.channels], 2 * cin));
            store.insert(format!("{prefix}.bias"), Tensor::zeros(&[s.channels]));
            init_batch_norm(store, &format!("{prefix}.bn"), s.channels);
            cin = s.channels;
        }
        for pair in 0..s.layers / 2 {
            let pair_in = if pair == 0 { stage_in } else { s.channels };
            if pair_in != s.channels {
                let name = format!("encoder.stage{si}.residual{pair}.weight");
                store.insert(&name, he_uniform(seed, &name, &[pair_in, s.channels], pair_in));
            }
        }
    }
}

/// `BN(ReLU(W · [x_i, max_{j∈N(i)} (x_j − x_i)] + b))` for each query `i` into `src`.
pub fn mr_conv(
    tape: &mut Tape,
    p: &Binder,
    prefix: &str,
    src: Var,
    query: Arc<Vec<usize>>,
    graph: &NeighborGraph,
    mode: Mode,
) -> Result<Var> {
    let xq = tape.gather(src, query.clone())?;
    let rel = tape.max_relative(src, query, &graph.neighbors)?;
    let h = tape.concat(&[xq, rel], 1)?;
    let y = linear(tape, p, prefix, h, true)?;
    let y = tape.relu(y);
    batch_norm(tape, p, &format!("{prefix}.bn"), y, mode)
}

/// RGB and NDC position per point, `[N, 6]`.
pub fn input_features(cloud: &ScenePointCloud) -> Tensor {
    let data = cloud
        .colors
        .iter()
        .zip(&cloud.positions)
        .flat_map(|(c, p)| [c[0], c[1], c[2], p[0], p[1], p[2]])
        .collect();
    Tensor::new(&[cloud.len(), INPUT_CHANNELS], data).expect("shape")
}

/// Content features `[N', C_out]` for the cloud whose geometry is `geom`.
pub fn encode(
    tape: &mut Tape,
    p: &Binder,
    cfg: &EncoderConfig,
    geom: &EncoderGeometry,
    input: Var,
    mode: Mode,
) -> Result<Var> {
    let mut x = input;
    for (si, (s, g)) in cfg.stages.iter().zip(&geom.stages).enumerate() {
        let identity = Arc::new((0..g.positions.len()).collect::<Vec<_>>());
        let mut pair_input = tape.gather(x, g.sample.clone())?;
        let mut h = x;
        for l in 0..s.layers {
            let prefix = format!("encoder.stage{si}.layer{l}");
            h = if l == 0 {
                mr_conv(tape, p, &prefix, h, g.sample.clone(), &g.down, mode)?
            } else {
                let within = g.within.as_ref().expect("built for multi-layer stages");
                mr_conv(tape, p, &prefix, h, identity.clone(), within, mode)?
            };
            if l % 2 == 1 {
                let pair = l / 2;
                let skip = if tape.shape(pair_input)[1] == s.channels {
                    pair_input
                } else {
                    linear(tape, p, &format!("encoder.stage{si}.residual{pair}"), pair_input, false)?
                };
                h = tape.add(h, skip)?;
                pair_input = h;
            }
        }
        x = h;
    }
    Ok(x)
}
