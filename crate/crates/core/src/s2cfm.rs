//! Sparse scene context: multi-scale sparse scene features, voxel RoI pooling,
//! and the key–value memory that injects scene-level context into RoI features.
//!
//! Memory addressing is a softmax over key dot products; reading averages the
//! value items of each key and blends them with the addressing weights. The
//! memory is trained by three distances: keys toward the mean of the scene
//! features they win, keys toward orthonormality, and value items toward the
//! highest-probability features of their key.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::backbone::MultiScaleFeatures;
use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::numerics::{
    finite_diff_gradcheck, linear, relative_error, relu_inplace, softmax, trilinear_into, Dense, DenseField, NormKind,
    Tensor,
};
use crate::voxelizer::SceneConfig;

/// Width of the reduced scene feature and of the memory.
pub const CONTEXT_CHANNELS: usize = 160;

/// Occupied voxels with one feature row each.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSceneFeature {
    pub coords: Vec<[usize; 3]>,
    /// `(N, C)`.
    pub features: Tensor,
    pub grid_dims: [usize; 3],
    pub scene: SceneConfig,
    lookup: HashMap<[usize; 3], usize>,
}

impl SparseSceneFeature {
    pub fn new(coords: Vec<[usize; 3]>, features: Tensor, grid_dims: [usize; 3], scene: SceneConfig) -> Result<Self> {
        if features.rank() != 2 || features.dim(0) != coords.len() {
            return Err(Error::shape("SparseSceneFeature", "rows", coords.len(), features.shape().first().copied().unwrap_or(0)));
        }
        let mut lookup = HashMap::with_capacity(coords.len());
        for (i, &c) in coords.iter().enumerate() {
            if (0..3).any(|a| c[a] >= grid_dims[a]) {
                return Err(Error::OutOfGrid { coord: c, dims: grid_dims });
            }
            if lookup.insert(c, i).is_some() {
                return Err(Error::DuplicateCoordinate(c));
            }
        }
        Ok(Self {
            coords,
            features,
            grid_dims,
            scene,
            lookup,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.dim(1)
    }

    pub fn index_of(&self, coord: [usize; 3]) -> Option<usize> {
        self.lookup.get(&coord).copied()
    }

    pub fn center(&self, i: usize) -> [f64; 3] {
        self.scene.voxel_center(self.coords[i])
    }

    /// Cell containing `p`, possibly outside the grid.
    pub fn cell_of(&self, p: [f64; 3]) -> [i64; 3] {
        let min = self.scene.min();
        [0, 1, 2].map(|a| ((p[a] - min[a]) / self.scene.voxel_size[a]).floor() as i64)
    }
}

/// Interpolates every scale at each occupied voxel's center.
///
/// Scale `s` node `j` is centered on fine voxel `j·s`, so fine voxel `i`
/// reads index-space coordinate `i / s`. Returns `(N, Σ C_s)`.
pub fn interpolate_scales(coords: &[[usize; 3]], multiscale: &MultiScaleFeatures) -> Result<Tensor> {
    let fields = multiscale.scales.iter().map(DenseField::new).collect::<Result<Vec<_>>>()?;
    let widths: Vec<usize> = multiscale.scales.iter().map(|t| t.dim(0)).collect();
    let total: usize = widths.iter().sum();
    let mut out = vec![0.0; coords.len() * total];
    for (row, c) in out.chunks_exact_mut(total.max(1)).zip(coords) {
        let mut off = 0;
        for ((field, &w), &s) in fields.iter().zip(&widths).zip(&multiscale.strides) {
            let q = [0, 1, 2].map(|a| c[a] as f64 / s as f64);
            trilinear_into(field, q, &mut row[off..off + w]);
            off += w;
        }
    }
    Tensor::new(vec![coords.len(), total], out)
}

/// `relu(reducer([initial ‖ s1 ‖ s2 ‖ s3]))` per occupied voxel.
pub fn build_scene_feature(
    initial: &Tensor,
    coords: &[[usize; 3]],
    multiscale: &MultiScaleFeatures,
    reducer: &Dense,
    grid_dims: [usize; 3],
    scene: &SceneConfig,
) -> Result<SparseSceneFeature> {
    if initial.rank() != 2 || initial.dim(0) != coords.len() {
        return Err(Error::shape("build_scene_feature", "initial rows", coords.len(), initial.shape().first().copied().unwrap_or(0)));
    }
    let interp = interpolate_scales(coords, multiscale)?;
    let cat = Tensor::concat_columns(&[initial, &interp])?;
    if cat.dim(1) != reducer.in_dim() {
        return Err(Error::shape("build_scene_feature", "concatenated width", reducer.in_dim(), cat.dim(1)));
    }
    let features = reducer.forward_relu(&cat)?;
    SparseSceneFeature::new(coords.to_vec(), features, grid_dims, scene.clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiPoolConfig {
    /// Sub-regions per box axis.
    pub grid: usize,
    /// Manhattan radii in voxel-index units.
    pub radii: Vec<usize>,
    pub max_neighbors: usize,
}

impl Default for RoiPoolConfig {
    fn default() -> Self {
        Self {
            grid: 6,
            radii: vec![2, 4],
            max_neighbors: 32,
        }
    }
}

impl RoiPoolConfig {
    pub fn sub_regions(&self) -> usize {
        self.grid.pow(3)
    }
}

/// Two-layer point-set encoder of one radius group.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSetLayers {
    /// `(3 + C) → hidden`; the first three inputs are the metric offset.
    pub first: Dense,
    pub second: Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiPoolParams {
    pub groups: Vec<PointSetLayers>,
    /// Bias-free map from the concatenated group outputs to the memory width.
    pub projection: Dense,
}

impl RoiPoolParams {
    pub fn seeded(scene_channels: usize, widths: [usize; 2], groups: usize, out_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dense = |i: usize, o: usize, bias: bool| {
            let n = Normal::new(0.0, (2.0 / i as f64).sqrt()).expect("valid std");
            let w = Tensor::from_fn(&[o, i], |_| n.sample(&mut rng));
            Dense::new(w, bias.then(|| vec![0.0; o])).expect("rank 2")
        };
        let groups = (0..groups)
            .map(|_| PointSetLayers {
                first: dense(3 + scene_channels, widths[0], true),
                second: dense(widths[0], widths[1], true),
            })
            .collect::<Vec<_>>();
        let cat = groups.len() * widths[1];
        Self {
            groups,
            projection: dense(cat, out_channels, false),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.projection.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.groups.iter().map(|g| g.first.param_count() + g.second.param_count()).sum::<usize>() + self.projection.param_count()
    }
}

/// Sub-RoI features of one proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiFeature {
    /// `(T³, C)`.
    pub sub_features: Tensor,
    pub sub_centers: Vec<[f64; 3]>,
    /// Set when no sub-center falls inside the voxel grid; features are then zero.
    pub outside: bool,
    /// Largest neighbor count seen per radius group.
    pub max_neighbors: Vec<usize>,
}

/// `T³` sub-region centers, x fastest, in world coordinates.
pub fn sub_centers(proposal: &Box3D, t: usize) -> Vec<[f64; 3]> {
    let frac = |i: usize| (i as f64 + 0.5) / t as f64 - 0.5;
    let mut out = Vec::with_capacity(t * t * t);
    for k in 0..t {
        for j in 0..t {
            for i in 0..t {
                let local = [frac(i) * proposal.size[0], frac(j) * proposal.size[1], frac(k) * proposal.size[2]];
                out.push(proposal.to_world(local));
            }
        }
    }
    out
}

/// Lattice offsets with L1 norm ≤ `radius`, ordered by norm.
fn ball_offsets(radius: usize) -> Vec<([i64; 3], usize)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                let d = (dx.abs() + dy.abs() + dz.abs()) as usize;
                if d <= radius {
                    out.push(([dx, dy, dz], d));
                }
            }
        }
    }
    out.sort_by_key(|&(_, d)| d);
    out
}

/// Occupied voxels within Manhattan `radius` of `cell`, nearest first with
/// ties by scene index, truncated to `max`.
pub fn manhattan_neighbors(scene: &SparseSceneFeature, cell: [i64; 3], radius: usize, max: usize) -> Vec<usize> {
    neighbors_with(scene, cell, &ball_offsets(radius), max)
}

fn neighbors_with(scene: &SparseSceneFeature, cell: [i64; 3], offsets: &[([i64; 3], usize)], max: usize) -> Vec<usize> {
    let dims = scene.grid_dims;
    let mut found: Vec<(usize, usize)> = Vec::new();
    for &(o, d) in offsets {
        let c = [cell[0] + o[0], cell[1] + o[1], cell[2] + o[2]];
        if (0..3).any(|a| c[a] < 0 || c[a] >= dims[a] as i64) {
            continue;
        }
        if let Some(i) = scene.index_of([c[0] as usize, c[1] as usize, c[2] as usize]) {
            found.push((d, i));
        }
    }
    found.sort_unstable();
    found.truncate(max);
    found.into_iter().map(|(_, i)| i).collect()
}

/// Pools proposals against one scene, caching each group's feature half of
/// the first point-set layer.
pub struct RoiPooler<'a> {
    scene: &'a SparseSceneFeature,
    params: &'a RoiPoolParams,
    cfg: &'a RoiPoolConfig,
    offsets: Vec<Vec<([i64; 3], usize)>>,
    /// Per group: `(N, hidden)` feature projections plus bias.
    feature_terms: Vec<Tensor>,
    /// Per group: `(hidden, 3)` offset columns of the first layer.
    offset_weights: Vec<Vec<[f64; 3]>>,
}

impl<'a> RoiPooler<'a> {
    pub fn new(scene: &'a SparseSceneFeature, params: &'a RoiPoolParams, cfg: &'a RoiPoolConfig) -> Result<Self> {
        if params.groups.len() != cfg.radii.len() {
            return Err(Error::shape("RoiPooler", "radius groups", cfg.radii.len(), params.groups.len()));
        }
        if cfg.grid == 0 {
            return Err(Error::invalid("roi grid must be positive"));
        }
        let c = scene.channels();
        let mut feature_terms = Vec::new();
        let mut offset_weights = Vec::new();
        for g in &params.groups {
            if g.first.in_dim() != 3 + c {
                return Err(Error::shape("RoiPooler", "first layer input", 3 + c, g.first.in_dim()));
            }
            let w = g.first.weight();
            let h = g.first.out_dim();
            let wf = Tensor::from_fn(&[h, c], |i| w.at(&[i[0], 3 + i[1]]));
            feature_terms.push(linear(&scene.features, &wf, g.first.bias())?);
            offset_weights.push((0..h).map(|o| [w.at(&[o, 0]), w.at(&[o, 1]), w.at(&[o, 2])]).collect());
        }
        let cat: usize = params.groups.iter().map(|g| g.second.out_dim()).sum();
        if params.projection.in_dim() != cat {
            return Err(Error::shape("RoiPooler", "projection input", cat, params.projection.in_dim()));
        }
        Ok(Self {
            scene,
            params,
            cfg,
            offsets: cfg.radii.iter().map(|&r| ball_offsets(r)).collect(),
            feature_terms,
            offset_weights,
        })
    }

    pub fn pool(&self, proposal: &Box3D) -> Result<RoiFeature> {
        let centers = sub_centers(proposal, self.cfg.grid);
        let t3 = centers.len();
        let out_c = self.params.out_channels();
        let cat: usize = self.params.groups.iter().map(|g| g.second.out_dim()).sum();
        let dims = self.scene.grid_dims;
        let cells: Vec<[i64; 3]> = centers.iter().map(|&p| self.scene.cell_of(p)).collect();
        let outside = !cells.iter().any(|c| (0..3).all(|a| c[a] >= 0 && c[a] < dims[a] as i64));
        let mut max_neighbors = vec![0; self.cfg.radii.len()];
        if outside {
            return Ok(RoiFeature {
                sub_features: Tensor::zeros(&[t3, out_c]),
                sub_centers: centers,
                outside,
                max_neighbors,
            });
        }
        let mut pooled = vec![0.0f64; t3 * cat];
        let mut hidden: Vec<f64> = Vec::new();
        for (t, (&p, &cell)) in centers.iter().zip(&cells).enumerate() {
            let mut off = 0;
            for (g, layers) in self.params.groups.iter().enumerate() {
                let nb = neighbors_with(self.scene, cell, &self.offsets[g], self.cfg.max_neighbors);
                debug_assert!(nb.len() <= self.cfg.max_neighbors);
                max_neighbors[g] = max_neighbors[g].max(nb.len());
                let (h1, h2) = (layers.first.out_dim(), layers.second.out_dim());
                if !nb.is_empty() {
                    hidden.clear();
                    hidden.resize(nb.len() * h1, 0.0);
                    for (row, &i) in hidden.chunks_exact_mut(h1).zip(&nb) {
                        let vc = self.scene.center(i);
                        let d = [vc[0] - p[0], vc[1] - p[1], vc[2] - p[2]];
                        let base = self.feature_terms[g].row(i);
                        for ((r, b), w) in row.iter_mut().zip(base).zip(&self.offset_weights[g]) {
                            *r = b + w[0] * d[0] + w[1] * d[1] + w[2] * d[2];
                        }
                    }
                    relu_inplace(&mut hidden);
                    let second = layers.second.forward_relu(&Tensor::new(vec![nb.len(), h1], std::mem::take(&mut hidden))?)?;
                    let dst = &mut pooled[t * cat + off..t * cat + off + h2];
                    for row in second.data().chunks_exact(h2) {
                        for (o, v) in dst.iter_mut().zip(row) {
                            *o = o.max(*v);
                        }
                    }
                    hidden = second.into_data();
                }
                off += h2;
            }
        }
        let sub_features = self.params.projection.forward(&Tensor::new(vec![t3, cat], pooled)?)?;
        Ok(RoiFeature {
            sub_features,
            sub_centers: centers,
            outside,
            max_neighbors,
        })
    }
}

/// Pools a single proposal.
pub fn voxel_roi_pool(scene: &SparseSceneFeature, proposal: &Box3D, params: &RoiPoolParams, cfg: &RoiPoolConfig) -> Result<RoiFeature> {
    RoiPooler::new(scene, params, cfg)?.pool(proposal)
}

/// Key matrix `(K, C)` and value items `(K, V, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryModule {
    pub keys: Tensor,
    pub values: Tensor,
}

impl MemoryModule {
    pub fn new(keys: Tensor, values: Tensor) -> Result<Self> {
        if keys.rank() != 2 || values.rank() != 3 {
            return Err(Error::invalid("memory keys must be (K, C) and values (K, V, C)"));
        }
        if values.dim(0) != keys.dim(0) {
            return Err(Error::shape("MemoryModule", "value keys", keys.dim(0), values.dim(0)));
        }
        if values.dim(2) != keys.dim(1) {
            return Err(Error::shape("MemoryModule", "value channels", keys.dim(1), values.dim(2)));
        }
        keys.ensure_finite("memory keys")?;
        values.ensure_finite("memory values")?;
        Ok(Self { keys, values })
    }

    /// Unit-normal keys normalized per row; values Normal(0, 0.1).
    pub fn seeded(k: usize, v: usize, c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keys = Tensor::from_fn(&[k, c], |_| StandardNormal.sample(&mut rng));
        for r in 0..k {
            let row = keys.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        let small = Normal::new(0.0, 0.1).expect("valid std");
        let values = Tensor::from_fn(&[k, v, c], |_| small.sample(&mut rng));
        Self::new(keys, values).expect("consistent shapes")
    }

    pub fn num_keys(&self) -> usize {
        self.keys.dim(0)
    }

    pub fn num_values(&self) -> usize {
        self.values.dim(1)
    }

    pub fn channels(&self) -> usize {
        self.keys.dim(1)
    }

    pub fn param_count(&self) -> usize {
        self.keys.len() + self.values.len()
    }

    /// `g_value(k)`: mean of key `k`'s value items, `(K, C)`.
    pub fn mean_values(&self) -> Tensor {
        let (k, v, c) = (self.num_keys(), self.num_values(), self.channels());
        let vd = self.values.data();
        Tensor::from_fn(&[k, c], |i| (0..v).map(|j| vd[(i[0] * v + j) * c + i[1]]).sum::<f64>() / v as f64)
    }
}

/// Row-wise softmax of `f · keysᵀ`: `(T, K)`.
pub fn key_address(f: &Tensor, keys: &Tensor) -> Result<Tensor> {
    let logits = linear(f, keys, None)?;
    let k = keys.dim(0);
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k.max(1)) {
        out.extend(softmax(row)?);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// `g_roi(t) = Σ_k W(t, k) · mean_v M_v(k, v)`: `(T, C)`.
pub fn value_read(w: &Tensor, mem: &MemoryModule) -> Result<Tensor> {
    if w.rank() != 2 || w.dim(1) != mem.num_keys() {
        return Err(Error::shape("value_read", "keys", mem.num_keys(), w.shape().last().copied().unwrap_or(0)));
    }
    let g = mem.mean_values();
    // linear() contracts against rows of its weight, so pass g transposed.
    let gt = Tensor::from_fn(&[mem.channels(), mem.num_keys()], |i| g.at(&[i[1], i[0]]));
    linear(w, &gt, None)
}

/// `[f_roi ‖ g_roi]` per sub-region: `(T, 2C)`.
pub fn context_aware_roi(roi: &RoiFeature, mem: &MemoryModule) -> Result<Tensor> {
    let w = key_address(&roi.sub_features, &mem.keys)?;
    let g = value_read(&w, mem)?;
    Tensor::concat_columns(&[&roi.sub_features, &g])
}

/// Hard assignment of scene features to their most probable key.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyAssignment {
    /// `(N, K)` addressing probabilities.
    pub probs: Tensor,
    pub key_of: Vec<usize>,
    /// Members of each key, ascending by feature index.
    pub sets: Vec<Vec<usize>>,
}

impl KeyAssignment {
    /// Members of key `k` ordered by probability, highest first, ties by index.
    pub fn ranked(&self, k: usize) -> Vec<usize> {
        let nk = self.probs.dim(1);
        let p = self.probs.data();
        let mut m = self.sets[k].clone();
        m.sort_by(|&a, &b| p[b * nk + k].total_cmp(&p[a * nk + k]).then(a.cmp(&b)));
        m
    }
}

/// Argmax key per feature (lowest key on ties).
pub fn assign_scene_to_keys(features: &Tensor, keys: &Tensor) -> Result<KeyAssignment> {
    let k = keys.dim(0);
    let probs = if features.dim(0) == 0 {
        Tensor::zeros(&[0, k])
    } else {
        key_address(features, keys)?
    };
    let mut key_of = Vec::with_capacity(features.dim(0));
    let mut sets = vec![Vec::new(); k];
    for (n, row) in probs.data().chunks_exact(k.max(1)).enumerate() {
        let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        key_of.push(best);
        sets[best].push(n);
    }
    Ok(KeyAssignment { probs, key_of, sets })
}

/// Memory-update losses with gradients under fixed assignments.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryLosses {
    pub key: f64,
    pub ortho: f64,
    pub value: f64,
    pub total: f64,
    /// `∂L_mem/∂M_k`, `(K, C)`.
    pub grad_keys: Tensor,
    /// `∂L_mem/∂M_v`, `(K, V, C)`.
    pub grad_values: Tensor,
    pub assignment: KeyAssignment,
}

/// Key, orthogonality and value losses over one scene's features `(N, C)`.
///
/// `L_key = Σ_k ‖key_k − mean(U_k)‖`, `L_ortho = ‖I − M_k M_kᵀ‖_F`, and
/// `L_value = Σ_k Σ_{v < min(|U_k|, V)} ‖M_v(k, v) − f(rank_v(U_k))‖`.
/// Keys with no members contribute nothing to the key and value terms.
pub fn memory_losses(features: &Tensor, mem: &MemoryModule) -> Result<MemoryLosses> {
    if features.rank() != 2 || features.dim(1) != mem.channels() {
        return Err(Error::shape("memory_losses", "feature channels", mem.channels(), features.shape().last().copied().unwrap_or(0)));
    }
    features.ensure_finite("scene features")?;
    let assignment = assign_scene_to_keys(features, &mem.keys)?;
    let (k, v, c) = (mem.num_keys(), mem.num_values(), mem.channels());
    let mut grad_keys = Tensor::zeros(&[k, c]);
    let mut grad_values = Tensor::zeros(&[k, v, c]);
    let norm = NormKind::Plain;
    let mut residual = vec![0.0; c];
    let mut g = vec![0.0; c];

    let mut key_loss = 0.0;
    for (j, set) in assignment.sets.iter().enumerate() {
        if set.is_empty() {
            continue;
        }
        for (ch, r) in residual.iter_mut().enumerate() {
            let mean = set.iter().map(|&n| features.at(&[n, ch])).sum::<f64>() / set.len() as f64;
            *r = mem.keys.at(&[j, ch]) - mean;
        }
        key_loss += norm.apply(&residual);
        norm.grad(&residual, &mut g);
        grad_keys.row_mut(j).iter_mut().zip(&g).for_each(|(o, x)| *o += x);
    }

    // A = I − M Mᵀ; ∂‖A‖_F/∂M = −2 A M / ‖A‖_F.
    let kd = mem.keys.data();
    let a = Tensor::from_fn(&[k, k], |i| {
        let dot: f64 = (0..c).map(|ch| kd[i[0] * c + ch] * kd[i[1] * c + ch]).sum();
        f64::from(i[0] == i[1]) - dot
    });
    let ortho = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    if ortho > 0.0 {
        for i in 0..k {
            for ch in 0..c {
                let am: f64 = (0..k).map(|j| a.at(&[i, j]) * kd[j * c + ch]).sum();
                grad_keys.data_mut()[i * c + ch] -= 2.0 * am / ortho;
            }
        }
    }

    let mut value_loss = 0.0;
    let vd = mem.values.data();
    for j in 0..k {
        for (slot, &n) in assignment.ranked(j).iter().take(v).enumerate() {
            let base = (j * v + slot) * c;
            for (ch, r) in residual.iter_mut().enumerate() {
                *r = vd[base + ch] - features.at(&[n, ch]);
            }
            value_loss += norm.apply(&residual);
            norm.grad(&residual, &mut g);
            grad_values.data_mut()[base..base + c].copy_from_slice(&g);
        }
    }

    let total = key_loss + ortho + value_loss;
    if !total.is_finite() {
        return Err(Error::NonFinite("memory losses"));
    }
    Ok(MemoryLosses {
        key: key_loss,
        ortho,
        value: value_loss,
        total,
        grad_keys,
        grad_values,
        assignment,
    })
}

/// Deliberate corruption of the analytic gradient, for validating the checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GradientFault {
    #[default]
    None,
    Zero,
    Double,
}

impl GradientFault {
    fn factor(self) -> f64 {
        match self {
            GradientFault::None => 1.0,
            GradientFault::Zero => 0.0,
            GradientFault::Double => 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryGradCheck {
    pub max_rel_err: f64,
    pub keys_rel_err: f64,
    pub values_rel_err: f64,
    /// Smallest top-1 minus top-2 logit gap over the scene features.
    pub margin: f64,
    pub parameters: usize,
}

/// Smallest gap between the best and second-best key logit of any feature.
fn assignment_margin(features: &Tensor, keys: &Tensor) -> Result<f64> {
    let logits = linear(features, keys, None)?;
    let k = keys.dim(0);
    if k < 2 {
        return Ok(f64::INFINITY);
    }
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut s = row.to_vec();
            s.sort_by(|a, b| b.total_cmp(a));
            s[0] - s[1]
        })
        .fold(f64::INFINITY, f64::min))
}

/// Central-difference check of `L_mem` over every entry of `M_k` and `M_v`.
///
/// Fails with [`Error::UnstableAssignment`] when the key assignment margin is
/// too small for step `h`, or when any perturbed evaluation changes the
/// assignment or the value ranking.
pub fn memory_grad_check(mem: &MemoryModule, features: &Tensor, h: f64, fault: GradientFault) -> Result<MemoryGradCheck> {
    let base = memory_losses(features, mem)?;
    let margin = assignment_margin(features, &mem.keys)?;
    let fmax = features.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    // One key entry moved by h shifts any logit by at most h·|f|; demand a wide cushion.
    if margin <= 100.0 * h * fmax {
        return Err(Error::UnstableAssignment(format!("key margin {margin:.3e} too small for step {h:e}")));
    }
    let (k, v, c) = (mem.num_keys(), mem.num_values(), mem.channels());
    let nk = k * c;
    let ranking: Vec<Vec<usize>> = (0..k).map(|j| base.assignment.ranked(j).into_iter().take(v + 1).collect()).collect();
    let mut x0 = mem.keys.data().to_vec();
    x0.extend_from_slice(mem.values.data());
    let mut analytic = base.grad_keys.data().to_vec();
    analytic.extend_from_slice(base.grad_values.data());
    analytic.iter_mut().for_each(|g| *g *= fault.factor());

    let mut unstable = false;
    let report = finite_diff_gradcheck(
        |x| {
            let m = MemoryModule {
                keys: Tensor::new(vec![k, c], x[..nk].to_vec()).expect("sized"),
                values: Tensor::new(vec![k, v, c], x[nk..].to_vec()).expect("sized"),
            };
            match memory_losses(features, &m) {
                Ok(l) => {
                    let same = l.assignment.key_of == base.assignment.key_of
                        && (0..k).all(|j| l.assignment.ranked(j).into_iter().take(v + 1).eq(ranking[j].iter().copied()));
                    unstable |= !same;
                    l.total
                }
                Err(_) => f64::NAN,
            }
        },
        &x0,
        &analytic,
        h,
    )?;
    if unstable {
        return Err(Error::UnstableAssignment("a perturbed evaluation changed the assignment or value ranking".into()));
    }
    Ok(MemoryGradCheck {
        max_rel_err: report.max_rel_err,
        keys_rel_err: report.max_over(0..nk),
        values_rel_err: report.max_over(nk..x0.len()),
        margin,
        parameters: x0.len(),
    })
}

/// Sizes of a random memory grad-check instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckDims {
    pub keys: usize,
    pub values: usize,
    pub channels: usize,
    pub features: usize,
    /// Standard deviation of the sampled scene features. Near unit scale the
    /// roundoff in `L_mem` swamps gradient components below about 1e-4 at
    /// `h = 1e-6`.
    pub feature_scale: f64,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        Self {
            keys: 3,
            values: 4,
            channels: 8,
            features: 20,
            feature_scale: 0.1,
        }
    }
}

/// Outcome of [`seeded_memory_grad_check`], including how many draws were rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct SeededGradCheck {
    pub check: MemoryGradCheck,
    pub attempts: usize,
}

/// Draws a random memory and scene from `seed`, retrying up to `max_attempts`
/// times when the assignment is not stable under the step.
pub fn seeded_memory_grad_check(
    seed: u64,
    dims: GradCheckDims,
    h: f64,
    fault: GradientFault,
    max_attempts: usize,
) -> Result<SeededGradCheck> {
    let mut last = Error::UnstableAssignment("no attempts made".into());
    for attempt in 0..max_attempts {
        let sub = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(attempt as u64);
        let mem = MemoryModule::seeded(dims.keys, dims.values, dims.channels, sub);
        let mut rng = ChaCha8Rng::seed_from_u64(sub ^ 0x5DEE_CE66);
        let features = Tensor::from_fn(&[dims.features, dims.channels], |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            dims.feature_scale * z
        });
        match memory_grad_check(&mem, &features, h, fault) {
            Ok(check) => {
                return Ok(SeededGradCheck {
                    check,
                    attempts: attempt + 1,
                })
            }
            Err(e @ Error::UnstableAssignment(_)) => last = e,
            Err(e) => return Err(e),
        }
    }
    Err(last)
}

/// Worst relative error between two gradients, for reports.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| relative_error(x, y)).fold(0.0, f64::max)
}

/// All learned parameters of the scene-context path.
#[derive(Clone, Debug, PartialEq)]
pub struct S2cfmParams {
    pub reducer: Dense,
    pub pool: RoiPoolParams,
    pub memory: MemoryModule,
}

impl S2cfmParams {
    /// Reducer `in_channels → C` with bias, pooling widths 32/16, memory `K × V`.
    pub fn seeded(in_channels: usize, channels: usize, k: usize, v: usize, radii: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, (2.0 / in_channels as f64).sqrt()).expect("valid std");
        let w = Tensor::from_fn(&[channels, in_channels], |_| n.sample(&mut rng));
        Self {
            reducer: Dense::new(w, Some(vec![0.0; channels])).expect("rank 2"),
            pool: RoiPoolParams::seeded(channels, [32, 16], radii, channels, seed.wrapping_add(1)),
            memory: MemoryModule::seeded(k, v, channels, seed.wrapping_add(2)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.reducer.param_count() + self.pool.param_count() + self.memory.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn small_scene_config() -> SceneConfig {
        SceneConfig {
            range_x: (0.0, 3.2),
            range_y: (0.0, 3.2),
            range_z: (0.0, 1.6),
            voxel_size: [0.2, 0.2, 0.2],
            max_points_per_voxel: 4,
            max_voxels: 10_000,
        }
    }

    fn random_scene(rng: &mut ChaCha8Rng, occupancy: f64, c: usize) -> SparseSceneFeature {
        let cfg = small_scene_config();
        let dims = cfg.grid_dims().unwrap();
        let mut coords = Vec::new();
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    if rng.random_bool(occupancy) {
                        coords.push([x, y, z]);
                    }
                }
            }
        }
        coords.shuffle(rng);
        let f = Tensor::from_fn(&[coords.len(), c], |_| rng.random_range(-1.0..1.0));
        SparseSceneFeature::new(coords, f, dims, cfg).unwrap()
    }

    fn random_ms(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> MultiScaleFeatures {
        let strides = vec![2, 4, 8];
        let scales = strides
            .iter()
            .zip([4, 5, 6])
            .map(|(&s, c)| {
                let d = dims.map(|n: usize| n.div_ceil(s));
                Tensor::from_fn(&[c, d[2], d[1], d[0]], |_| rng.random_range(-1.0..1.0))
            })
            .collect();
        MultiScaleFeatures { scales, strides }
    }

    /// Eight explicit corners with clamping at the far edge.
    fn corner_oracle(vol: &Tensor, q: [f64; 3]) -> Vec<f64> {
        let (c, nz, ny, nx) = (vol.dim(0), vol.dim(1), vol.dim(2), vol.dim(3));
        let n = [nx, ny, nz];
        let mut lo = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let u = q[a].min((n[a] - 1) as f64);
            lo[a] = (u.floor() as usize).min(n[a].saturating_sub(2));
            t[a] = if n[a] == 1 { 0.0 } else { u - lo[a] as f64 };
        }
        (0..c)
            .map(|ch| {
                let mut s = 0.0;
                for corner in 0..8 {
                    let b = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                    let mut w = 1.0;
                    let mut idx = [0; 3];
                    for a in 0..3 {
                        w *= if b[a] == 1 { t[a] } else { 1.0 - t[a] };
                        idx[a] = (lo[a] + b[a]).min(n[a] - 1);
                    }
                    s += w * vol.at(&[ch, idx[2], idx[1], idx[0]]);
                }
                s
            })
            .collect()
    }

    #[test]
    fn scene_feature_matches_corner_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = random_scene(&mut rng, 0.1, 3);
        let ms = random_ms(&mut rng, scene.grid_dims);
        let interp = interpolate_scales(&scene.coords, &ms).unwrap();
        for (n, c) in scene.coords.iter().enumerate() {
            let mut want = Vec::new();
            for (vol, &s) in ms.scales.iter().zip(&ms.strides) {
                want.extend(corner_oracle(vol, c.map(|i| i as f64 / s as f64)));
            }
            for (g, w) in interp.row(n).iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coarse_node_is_read_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ms = random_ms(&mut rng, [16, 16, 8]);
        let out = interpolate_scales(&[[8, 4, 0]], &ms).unwrap();
        let s0 = &ms.scales[0];
        for ch in 0..4 {
            assert_eq!(out.at(&[0, ch]), s0.at(&[ch, 0, 2, 4]));
        }
    }

    #[test]
    fn zero_multiscale_gives_reducer_of_initial() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = random_scene(&mut rng, 0.05, 2);
        let mut ms = random_ms(&mut rng, scene.grid_dims);
        ms.scales.iter_mut().for_each(|t| *t = Tensor::zeros(t.shape()));
        let reducer = Dense::new(Tensor::from_fn(&[4, 17], |_| rng.random_range(-1.0..1.0)), Some(vec![0.1; 4])).unwrap();
        let initial = Tensor::from_fn(&[scene.len(), 2], |_| rng.random_range(-1.0..1.0));
        let out = build_scene_feature(&initial, &scene.coords, &ms, &reducer, scene.grid_dims, &scene.scene).unwrap();
        let padded = Tensor::from_fn(&[scene.len(), 17], |i| if i[1] < 2 { initial.at(&i) } else { 0.0 });
        assert_eq!(out.features, reducer.forward_relu(&padded).unwrap());
    }

    #[test]
    fn empty_scene_builds_empty_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ms = random_ms(&mut rng, [16, 16, 8]);
        let reducer = Dense::zeros(17, 4, true);
        let cfg = small_scene_config();
        let out = build_scene_feature(&Tensor::zeros(&[0, 2]), &[], &ms, &reducer, [16, 16, 8], &cfg).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.features.shape(), &[0, 4]);
    }

    #[test]
    fn sub_centers_lie_inside_the_box() {
        let b = Box3D::new([1.0, 2.0, 0.5], [4.0, 2.0, 1.5], 0.7).unwrap();
        let cs = sub_centers(&b, 6);
        assert_eq!(cs.len(), 216);
        assert!(cs.iter().all(|&p| b.contains(p)));
        let mean = cs.iter().fold([0.0; 3], |m, p| [m[0] + p[0], m[1] + p[1], m[2] + p[2]]).map(|s| s / 216.0);
        for a in 0..3 {
            assert!((mean[a] - b.center[a]).abs() < 1e-12);
        }
    }

    /// Every occupied voxel scanned, filtered by L1 distance.
    fn exhaustive_neighbors(scene: &SparseSceneFeature, cell: [i64; 3], r: usize, max: usize) -> Vec<usize> {
        let mut all: Vec<(i64, usize)> = scene
            .coords
            .iter()
            .enumerate()
            .map(|(i, c)| ((0..3).map(|a| (c[a] as i64 - cell[a]).abs()).sum::<i64>(), i))
            .filter(|&(d, _)| d <= r as i64)
            .collect();
        all.sort();
        all.into_iter().take(max).map(|(_, i)| i).collect()
    }

    #[test]
    fn neighbors_match_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..200 {
            let scene = random_scene(&mut rng, [0.02, 0.1, 0.4][trial % 3], 1);
            let d = scene.grid_dims;
            let cell = [0, 1, 2].map(|a| rng.random_range(-2..d[a] as i64 + 2));
            for r in [2, 4] {
                let got = manhattan_neighbors(&scene, cell, r, 32);
                assert!(got.len() <= 32);
                assert_eq!(got, exhaustive_neighbors(&scene, cell, r, 32));
            }
        }
    }

    fn scene_with(coords: Vec<[usize; 3]>, c: usize, rng: &mut ChaCha8Rng) -> SparseSceneFeature {
        let cfg = small_scene_config();
        let f = Tensor::from_fn(&[coords.len(), c], |_| rng.random_range(-1.0..1.0));
        SparseSceneFeature::new(coords, f, cfg.grid_dims().unwrap(), cfg).unwrap()
    }

    /// Pools with explicit concatenation of `(offset ‖ feature)`.
    fn naive_pool(scene: &SparseSceneFeature, b: &Box3D, p: &RoiPoolParams, cfg: &RoiPoolConfig) -> Tensor {
        let centers = sub_centers(b, cfg.grid);
        let cat: usize = p.groups.iter().map(|g| g.second.out_dim()).sum();
        let mut pooled = Tensor::zeros(&[centers.len(), cat]);
        for (t, &pc) in centers.iter().enumerate() {
            let mut off = 0;
            for (g, &r) in p.groups.iter().zip(&cfg.radii) {
                let nb = exhaustive_neighbors(scene, scene.cell_of(pc), r, cfg.max_neighbors);
                for &i in &nb {
                    let vc = scene.center(i);
                    let mut input = vec![vc[0] - pc[0], vc[1] - pc[1], vc[2] - pc[2]];
                    input.extend_from_slice(scene.features.row(i));
                    let h = g.first.forward_relu(&Tensor::new(vec![1, input.len()], input).unwrap()).unwrap();
                    let h = g.second.forward_relu(&h).unwrap();
                    for (j, v) in h.data().iter().enumerate() {
                        let cur = pooled.at(&[t, off + j]);
                        pooled.set(&[t, off + j], cur.max(*v));
                    }
                }
                off += g.second.out_dim();
            }
        }
        p.projection.forward(&pooled).unwrap()
    }

    #[test]
    fn pool_matches_naive_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scene = random_scene(&mut rng, 0.15, 5);
        let cfg = RoiPoolConfig { grid: 3, ..Default::default() };
        let p = RoiPoolParams::seeded(5, [8, 4], 2, 6, 7);
        for _ in 0..5 {
            let b = Box3D::new([rng.random_range(0.5..2.7), rng.random_range(0.5..2.7), 0.8], [1.5, 0.8, 0.6], rng.random_range(-3.0..3.0)).unwrap();
            let got = voxel_roi_pool(&scene, &b, &p, &cfg).unwrap();
            assert!(!got.outside);
            assert!(got.max_neighbors.iter().all(|&n| n <= 32));
            assert!(got.sub_features.max_abs_diff(&naive_pool(&scene, &b, &p, &cfg)) < 1e-12);
        }
    }

    #[test]
    fn pool_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = RoiPoolConfig::default();
        let p = RoiPoolParams::seeded(3, [32, 16], 2, 5, 1);
        let b = Box3D::new([1.6, 1.6, 0.8], [1.2, 1.2, 1.2], 0.0).unwrap();
        let empty = scene_with(vec![], 3, &mut rng);
        let r = voxel_roi_pool(&empty, &b, &p, &cfg).unwrap();
        assert_eq!(r.sub_features.shape(), &[216, 5]);
        assert!(r.sub_features.data().iter().all(|&v| v == 0.0));

        let far = Box3D::new([50.0, 50.0, 0.8], [1.2, 1.2, 1.2], 0.0).unwrap();
        let scene = random_scene(&mut rng, 0.3, 3);
        let r = voxel_roi_pool(&scene, &far, &p, &cfg).unwrap();
        assert!(r.outside);
        assert!(r.sub_features.data().iter().all(|&v| v == 0.0));

        // A lone voxel at a sub-center's cell is that sub-center's only neighbor.
        let tiny = Box3D::new([1.7, 1.7, 0.9], [0.2, 0.2, 0.2], 0.0).unwrap();
        let cell = scene.cell_of(sub_centers(&tiny, 1)[0]);
        let lone = scene_with(vec![cell.map(|v| v as usize)], 3, &mut rng);
        assert_eq!(manhattan_neighbors(&lone, cell, 2, 32), vec![0]);
        let c = lone.center(0);
        assert!((0..3).all(|a| (c[a] - tiny.center[a]).abs() < 1e-12));
    }

    fn orthonormal_keys(k: usize, c: usize) -> Tensor {
        Tensor::from_fn(&[k, c], |i| f64::from(i[0] == i[1]))
    }

    #[test]
    fn addressing_examples() {
        let f = Tensor::from_fn(&[3, 4], |i| i[1] as f64 - i[0] as f64);
        let w = key_address(&f, &Tensor::from_fn(&[1, 4], |_| 0.3)).unwrap();
        assert!(w.data().iter().all(|&v| v == 1.0));

        let keys = orthonormal_keys(3, 4);
        let one = Tensor::from_fn(&[1, 4], |i| if i[1] == 2 { 50.0 } else { 0.0 });
        let w = key_address(&one, &keys).unwrap();
        assert!((w.at(&[0, 2]) - 1.0).abs() < 1e-12);

        let w = key_address(&Tensor::zeros(&[2, 4]), &keys).unwrap();
        assert!(w.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    /// Two loops over keys and channels.
    fn naive_read(w: &Tensor, mem: &MemoryModule) -> Tensor {
        let (k, v, c) = (mem.num_keys(), mem.num_values(), mem.channels());
        Tensor::from_fn(&[w.dim(0), c], |i| {
            let mut s = 0.0;
            for j in 0..k {
                let mut g = 0.0;
                for item in 0..v {
                    g += mem.values.at(&[j, item, i[1]]);
                }
                s += w.at(&[i[0], j]) * g / v as f64;
            }
            s
        })
    }

    #[test]
    fn value_read_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mem = MemoryModule::seeded(4, 1, 5, 1);
        let onehot = Tensor::from_fn(&[1, 4], |i| f64::from(i[1] == 2));
        assert_eq!(value_read(&onehot, &mem).unwrap().row(0), &mem.values.data()[10..15]);

        let mem = MemoryModule::seeded(4, 6, 5, 2);
        let uniform = Tensor::full(&[1, 4], 0.25);
        let g = mem.mean_values();
        let want: Vec<f64> = (0..5).map(|ch| (0..4).map(|j| g.at(&[j, ch])).sum::<f64>() / 4.0).collect();
        for (a, b) in value_read(&uniform, &mem).unwrap().row(0).iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }

        let f = Tensor::from_fn(&[7, 5], |_| rng.random_range(-1.0..1.0));
        let w = key_address(&f, &mem.keys).unwrap();
        assert!(value_read(&w, &mem).unwrap().max_abs_diff(&naive_read(&w, &mem)) < 1e-12);
    }

    #[test]
    fn context_examples() {
        let mut mem = MemoryModule::seeded(10, 50, 160, 3);
        mem.values = Tensor::zeros(mem.values.shape());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let roi = RoiFeature {
            sub_features: Tensor::from_fn(&[216, 160], |_| rng.random_range(-1.0..1.0)),
            sub_centers: vec![[0.0; 3]; 216],
            outside: false,
            max_neighbors: vec![0, 0],
        };
        let ctx = context_aware_roi(&roi, &mem).unwrap();
        assert_eq!(ctx.shape(), &[216, 320]);
        for t in 0..216 {
            assert_eq!(&ctx.row(t)[..160], roi.sub_features.row(t));
            assert!(ctx.row(t)[160..].iter().all(|&v| v == 0.0));
        }
        assert_eq!(context_aware_roi(&roi, &mem).unwrap(), ctx);
    }

    #[test]
    fn assignment_examples() {
        let keys = orthonormal_keys(3, 4);
        let a = assign_scene_to_keys(&Tensor::zeros(&[0, 4]), &keys).unwrap();
        assert!(a.sets.iter().all(Vec::is_empty));
        let f = Tensor::from_fn(&[1, 4], |i| f64::from(i[1] == 1));
        assert_eq!(assign_scene_to_keys(&f, &keys).unwrap().key_of, vec![1]);
    }

    #[test]
    fn ortho_and_key_zero_cases() {
        let keys = orthonormal_keys(3, 4);
        let mem = MemoryModule::new(keys.clone(), Tensor::zeros(&[3, 2, 4])).unwrap();
        // Each feature equals its key, so every mean equals its key.
        let l = memory_losses(&keys, &mem).unwrap();
        assert_eq!(l.ortho, 0.0);
        assert_eq!(l.key, 0.0);
        let skew = MemoryModule::new(Tensor::from_fn(&[2, 2], |i| if i == [1, 0] { 0.5 } else { f64::from(i[0] == i[1]) }), Tensor::zeros(&[2, 1, 2])).unwrap();
        assert!(memory_losses(&Tensor::zeros(&[0, 2]), &skew).unwrap().ortho > 0.0);
    }

    #[test]
    fn losses_reject_non_finite() {
        let mem = MemoryModule::seeded(2, 2, 3, 0);
        let mut f = Tensor::zeros(&[2, 3]);
        f.data_mut()[1] = f64::NAN;
        assert!(memory_losses(&f, &mem).is_err());
    }

    #[test]
    fn grad_check_passes_and_catches_faults() {
        for seed in 0..20 {
            let r = seeded_memory_grad_check(seed, GradCheckDims::default(), 1e-6, GradientFault::None, 20).unwrap();
            assert!(r.check.max_rel_err < 1e-5, "seed {seed}: {:?}", r.check);
        }
        let zero = seeded_memory_grad_check(0, GradCheckDims::default(), 1e-6, GradientFault::Zero, 20).unwrap();
        assert!(zero.check.max_rel_err > 0.99);
        let double = seeded_memory_grad_check(0, GradCheckDims::default(), 1e-6, GradientFault::Double, 20).unwrap();
        assert!(double.check.max_rel_err > 0.1);
    }

    #[test]
    fn grad_check_step_sweep_stays_accurate() {
        let errs: Vec<f64> = [1e-4, 1e-5, 1e-6]
            .iter()
            .map(|&h| seeded_memory_grad_check(3, GradCheckDims::default(), h, GradientFault::None, 20).unwrap().check.max_rel_err)
            .collect();
        assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
    }

    #[test]
    fn unstable_configuration_is_rejected() {
        let keys = orthonormal_keys(2, 2);
        let mem = MemoryModule::new(keys, Tensor::zeros(&[2, 1, 2])).unwrap();
        let tied = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        assert!(matches!(memory_grad_check(&mem, &tied, 1e-6, GradientFault::None), Err(Error::UnstableAssignment(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn address_rows_sum_to_one_and_ignore_orthogonal_shift(seed in any::<u64>(), shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Keys live in the first 4 of 6 channels; channel 5 is orthogonal to all.
            let keys = Tensor::from_fn(&[3, 6], |i| if i[1] < 4 { rng.random_range(-1.0..1.0) } else { 0.0 });
            let f = Tensor::from_fn(&[5, 6], |_| rng.random_range(-2.0..2.0));
            let w = key_address(&f, &keys).unwrap();
            for row in w.data().chunks_exact(3) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let moved = Tensor::from_fn(&[5, 6], |i| f.at(&i) + if i[1] == 5 { shift } else { 0.0 });
            prop_assert!(key_address(&moved, &keys).unwrap().max_abs_diff(&w) < 1e-12);
        }

        #[test]
        fn value_read_is_linear_in_values(seed in any::<u64>(), a in -4.0f64..4.0) {
            let mem = MemoryModule::seeded(3, 4, 5, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = key_address(&Tensor::from_fn(&[4, 5], |_| rng.random_range(-1.0..1.0)), &mem.keys).unwrap();
            let scaled = MemoryModule { values: mem.values.scale(a), ..mem.clone() };
            let lhs = value_read(&w, &scaled).unwrap();
            let rhs = value_read(&w, &mem).unwrap().scale(a);
            // Exact up to the rounding of the mean over value items.
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-15 * a.abs().max(1.0));
        }

        #[test]
        fn assignment_is_a_partition(seed in any::<u64>(), n in 0usize..40) {
            let mem = MemoryModule::seeded(4, 2, 6, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::from_fn(&[n, 6], |_| rng.random_range(-1.0..1.0));
            let a = assign_scene_to_keys(&f, &mem.keys).unwrap();
            let mut seen: Vec<usize> = a.sets.iter().flatten().copied().collect();
            prop_assert_eq!(seen.len(), n);
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), n);
        }

        #[test]
        fn key_and_value_losses_ignore_feature_order(seed in any::<u64>()) {
            let mem = MemoryModule::seeded(3, 4, 5, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = Tensor::from_fn(&[15, 5], |_| rng.random_range(-1.0..1.0));
            let base = memory_losses(&f, &mem).unwrap();
            let mut perm: Vec<usize> = (0..15).collect();
            perm.shuffle(&mut rng);
            let pf = Tensor::from_fn(&[15, 5], |i| f.at(&[perm[i[0]], i[1]]));
            let p = memory_losses(&pf, &mem).unwrap();
            prop_assert!((p.key - base.key).abs() < 1e-12);
            prop_assert!((p.value - base.value).abs() < 1e-12);
        }
    }
}
