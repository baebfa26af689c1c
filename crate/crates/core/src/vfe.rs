//! Voxel feature encoding: per-point linear + BN + ReLU, then a channelwise
//! max over each voxel's valid points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{BatchNorm, Dense, Tensor};
use crate::voxelizer::{VoxelizedScene, POINT_FEATURES};

/// Default encoded width.
pub const VFE_CHANNELS: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct VfeParams {
    pub fc: Dense,
    pub bn: BatchNorm,
}

impl VfeParams {
    pub fn new(fc: Dense, bn: BatchNorm) -> Result<Self> {
        if fc.in_dim() != POINT_FEATURES {
            return Err(Error::shape("VfeParams", "input features", POINT_FEATURES, fc.in_dim()));
        }
        if bn.channels() != fc.out_dim() {
            return Err(Error::shape("VfeParams", "bn channels", fc.out_dim(), bn.channels()));
        }
        Ok(Self { fc, bn })
    }

    /// Normal(0, 0.1) weights, no bias, frozen unit BN with `eps = 1e-3`.
    pub fn seeded(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let w = Tensor::from_fn(&[channels, POINT_FEATURES], |_| normal.sample(&mut rng));
        let bn = BatchNorm::new(vec![0.0; channels], vec![1.0; channels], vec![1.0; channels], vec![0.0; channels], 1e-3)
            .expect("valid bn");
        Self::new(Dense::new(w, None).expect("rank 2"), bn).expect("consistent widths")
    }

    pub fn channels(&self) -> usize {
        self.fc.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.fc.param_count() + self.bn.param_count()
    }
}

/// Encodes every voxel into a `D`-vector; returns `(N, D)`.
///
/// Only the first `counts[n]` rows of each voxel are read, so padding never
/// affects the result.
pub fn encode(scene: &VoxelizedScene, params: &VfeParams) -> Result<Tensor> {
    let f = &scene.features;
    if f.rank() != 3 || f.dim(2) != params.fc.in_dim() {
        return Err(Error::shape("vfe::encode", "point features", params.fc.in_dim(), f.shape().last().copied().unwrap_or(0)));
    }
    let d = params.channels();
    let total: usize = scene.counts.iter().sum();
    let mut rows = Vec::with_capacity(total * POINT_FEATURES);
    for n in 0..scene.len() {
        if scene.counts[n] == 0 {
            return Err(Error::invalid(format!("voxel {n} has no points")));
        }
        for p in scene.points_of(n) {
            rows.extend_from_slice(p);
        }
    }
    let per_point = Tensor::new(vec![total, POINT_FEATURES], rows)?;
    let mut act = params.fc.forward(&per_point)?;
    params.bn.apply_channels_last(act.data_mut())?;
    let act = act.into_data();

    let mut out = vec![f64::NEG_INFINITY; scene.len() * d];
    let mut r = 0;
    for (n, &c) in scene.counts.iter().enumerate() {
        let dst = &mut out[n * d..(n + 1) * d];
        for row in act[r * d..(r + c) * d].chunks_exact(d) {
            for (o, v) in dst.iter_mut().zip(row) {
                *o = o.max(*v);
            }
        }
        r += c;
    }
    // ReLU commutes with max, so it is applied once per voxel.
    for v in &mut out {
        *v = v.max(0.0);
    }
    Tensor::new(vec![scene.len(), d], out)
}
