//! Trilinear interpolation over dense or sparse voxel fields.
//!
//! Queries are continuous *index-space* coordinates `(u_x, u_y, u_z)`: node
//! `(i, j, k)` sits at `u = (i, j, k)`. [`GridGeometry`] converts metric
//! points into that space.

use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A 3D grid of `C`-channel feature vectors addressed by `(x, y, z)` node index.
pub trait VoxelField {
    /// Node counts along `(x, y, z)`.
    fn dims(&self) -> [usize; 3];
    fn channels(&self) -> usize;
    /// Adds `weight · f(node)` into `out`. Empty nodes add nothing.
    fn accumulate(&self, node: [usize; 3], weight: f64, out: &mut [f64]);
}

/// Dense `(C, Z, Y, X)` volume viewed as a field.
#[derive(Clone, Copy, Debug)]
pub struct DenseField<'a> {
    volume: &'a Tensor,
}

impl<'a> DenseField<'a> {
    pub fn new(volume: &'a Tensor) -> Result<Self> {
        if volume.rank() != 4 {
            return Err(Error::shape("DenseField", "volume rank", 4, volume.rank()));
        }
        Ok(Self { volume })
    }
}

impl VoxelField for DenseField<'_> {
    fn dims(&self) -> [usize; 3] {
        let s = self.volume.shape();
        [s[3], s[2], s[1]]
    }

    fn channels(&self) -> usize {
        self.volume.dim(0)
    }

    fn accumulate(&self, node: [usize; 3], weight: f64, out: &mut [f64]) {
        let s = self.volume.shape();
        let plane = s[1] * s[2] * s[3];
        let base = (node[2] * s[2] + node[1]) * s[3] + node[0];
        let data = self.volume.data();
        for (c, o) in out.iter_mut().enumerate() {
            *o += weight * data[c * plane + base];
        }
    }
}

/// Sparse field: only listed nodes are occupied.
#[derive(Clone, Debug, Default)]
pub struct SparseField {
    dims: [usize; 3],
    channels: usize,
    nodes: HashMap<[usize; 3], Vec<f64>>,
}

impl SparseField {
    pub fn new(dims: [usize; 3], channels: usize) -> Self {
        Self {
            dims,
            channels,
            nodes: HashMap::new(),
        }
    }

    pub fn insert(&mut self, node: [usize; 3], feature: Vec<f64>) -> Result<()> {
        if (0..3).any(|a| node[a] >= self.dims[a]) {
            return Err(Error::OutOfGrid { coord: node, dims: self.dims });
        }
        if feature.len() != self.channels {
            return Err(Error::shape("SparseField::insert", "channels", self.channels, feature.len()));
        }
        if self.nodes.insert(node, feature).is_some() {
            return Err(Error::DuplicateCoordinate(node));
        }
        Ok(())
    }
}

impl VoxelField for SparseField {
    fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn accumulate(&self, node: [usize; 3], weight: f64, out: &mut [f64]) {
        if let Some(f) = self.nodes.get(&node) {
            for (o, v) in out.iter_mut().zip(f) {
                *o += weight * v;
            }
        }
    }
}

/// Affine map from metric coordinates to index space: `u = (p − origin) / spacing`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
}

impl GridGeometry {
    pub fn to_index(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }
}

/// Lower node and blend fraction along one axis with `m` nodes, or `None`
/// when `u` lies more than one cell outside `[0, m − 1]`.
fn axis_cell(u: f64, m: usize) -> Option<(usize, f64)> {
    let hi = m as f64 - 1.0;
    if !u.is_finite() || u < -1.0 || u > hi + 1.0 {
        return None;
    }
    if m == 1 {
        return Some((0, 0.0));
    }
    let u = u.clamp(0.0, hi);
    let i0 = (u.floor() as usize).min(m - 2);
    Some((i0, u - i0 as f64))
}

/// Writes the 8-corner blend at index-space `query` into `out` and returns
/// `true`, or zeroes `out` and returns `false` when the query is out of bounds.
///
/// Queries within one cell of the grid are clamped onto its boundary. Empty
/// corners contribute zero with their weight unchanged.
pub fn trilinear_into<F: VoxelField + ?Sized>(field: &F, query: [f64; 3], out: &mut [f64]) -> bool {
    out.fill(0.0);
    let dims = field.dims();
    if dims.contains(&0) {
        return false;
    }
    let (Some((x0, tx)), Some((y0, ty)), Some((z0, tz))) =
        (axis_cell(query[0], dims[0]), axis_cell(query[1], dims[1]), axis_cell(query[2], dims[2]))
    else {
        return false;
    };
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - tz } else { tz };
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - ty } else { ty };
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - tx } else { tx };
                let w = wx * wy * wz;
                if w == 0.0 {
                    continue;
                }
                field.accumulate([x0 + dx, y0 + dy, z0 + dz], w, out);
            }
        }
    }
    true
}

/// Result of [`trilinear_interpolate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolated {
    pub value: Vec<f64>,
    pub in_bounds: bool,
}

pub fn trilinear_interpolate<F: VoxelField + ?Sized>(field: &F, query: [f64; 3]) -> Interpolated {
    let mut value = vec![0.0; field.channels()];
    let in_bounds = trilinear_into(field, query, &mut value);
    Interpolated { value, in_bounds }
}

/// Batch interpolation that counts out-of-bounds queries.
#[derive(Debug, Default)]
pub struct InterpStats {
    pub queries: usize,
    pub out_of_bounds: usize,
}

impl InterpStats {
    pub fn record(&mut self, in_bounds: bool) {
        self.queries += 1;
        if !in_bounds {
            self.out_of_bounds += 1;
        }
    }
}
