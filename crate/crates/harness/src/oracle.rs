//! Brute-force reference implementations, written without reusing the
//! library code paths they check.

use pillars_core::backbone::SliceAxis;
use pillars_core::geometry::{Box3D, Detection};
use pillars_core::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct 3D cross-correlation of `(C, Z, Y, X)` with `(O, C, kz, ky, kx)`,
/// zero padding `pad` and stride `stride` per `(z, y, x)` axis.
pub fn naive_conv3d(input: &Tensor, weight: &Tensor, stride: [usize; 3], pad: [usize; 3]) -> Tensor {
    let s = input.shape();
    let w = weight.shape();
    let (c, dims) = (s[0], [s[1], s[2], s[3]]);
    let (o, k) = (w[0], [w[2], w[3], w[4]]);
    let out_dims: [usize; 3] = std::array::from_fn(|a| (dims[a] + 2 * pad[a] - k[a]) / stride[a] + 1);
    Tensor::from_fn(&[o, out_dims[0], out_dims[1], out_dims[2]], |idx| {
        let mut acc = 0.0;
        for ci in 0..c {
            for dz in 0..k[0] {
                for dy in 0..k[1] {
                    for dx in 0..k[2] {
                        let p = [idx[1] * stride[0] + dz, idx[2] * stride[1] + dy, idx[3] * stride[2] + dx];
                        if (0..3).any(|a| p[a] < pad[a] || p[a] - pad[a] >= dims[a]) {
                            continue;
                        }
                        acc += weight.at(&[idx[0], ci, dz, dy, dx]) * input.at(&[ci, p[0] - pad[0], p[1] - pad[1], p[2] - pad[2]]);
                    }
                }
            }
        }
        acc
    })
}

/// Embeds a `(O, C, a, b)` view kernel as the degenerate 3D kernel of that view
/// (`1×k×k`, `k×k×1` or `k×1×k`), together with the 3D stride and padding.
pub fn degenerate_kernel(axis: SliceAxis, w: &Tensor, plane_stride: (usize, usize), slice_stride: usize) -> (Tensor, [usize; 3], [usize; 3]) {
    let (o, c, a, b) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    let (pa, pb) = ((a - 1) / 2, (b - 1) / 2);
    match axis {
        SliceAxis::Z => (
            Tensor::from_fn(&[o, c, 1, a, b], |i| w.at(&[i[0], i[1], i[3], i[4]])),
            [slice_stride, plane_stride.0, plane_stride.1],
            [0, pa, pb],
        ),
        SliceAxis::X => (
            Tensor::from_fn(&[o, c, a, b, 1], |i| w.at(&[i[0], i[1], i[2], i[3]])),
            [plane_stride.0, plane_stride.1, slice_stride],
            [pa, pb, 0],
        ),
        SliceAxis::Y => (
            Tensor::from_fn(&[o, c, a, 1, b], |i| w.at(&[i[0], i[1], i[2], i[4]])),
            [plane_stride.0, slice_stride, plane_stride.1],
            [pa, 0, pb],
        ),
    }
}

/// `W(t,k) = exp(f_t·m_k) / Σ_k' exp(f_t·m_k')`, two loops.
pub fn key_address_loops(f: &Tensor, keys: &Tensor) -> Vec<Vec<f64>> {
    let (t, k, c) = (f.dim(0), keys.dim(0), keys.dim(1));
    let mut out = Vec::with_capacity(t);
    for ti in 0..t {
        let mut logits = vec![0.0; k];
        for (ki, l) in logits.iter_mut().enumerate() {
            for ch in 0..c {
                *l += f.at(&[ti, ch]) * keys.at(&[ki, ch]);
            }
        }
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        out.push(e.iter().map(|x| x / z).collect());
    }
    out
}

/// `g(t) = Σ_k W(t,k) · mean_v M_v[k, v]`, explicit loops.
pub fn value_read_loops(w: &[Vec<f64>], values: &Tensor) -> Vec<Vec<f64>> {
    let (k, v, c) = (values.dim(0), values.dim(1), values.dim(2));
    w.iter()
        .map(|row| {
            let mut g = vec![0.0; c];
            for ki in 0..k {
                for ch in 0..c {
                    let mut mean = 0.0;
                    for vi in 0..v {
                        mean += values.at(&[ki, vi, ch]);
                    }
                    g[ch] += row[ki] * mean / v as f64;
                }
            }
            g
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MemoryLossOracle {
    pub key: f64,
    pub ortho: f64,
    pub value: f64,
    pub total: f64,
}

fn euclid(a: impl Iterator<Item = f64>) -> f64 {
    a.map(|d| d * d).sum::<f64>().sqrt()
}

/// Memory update losses from their definitions: hard assignment by highest
/// addressing probability, key-to-mean distances, `‖I − M_k M_kᵀ‖_F`, and
/// value items paired with assigned features in descending probability.
pub fn memory_loss_oracle(features: &Tensor, keys: &Tensor, values: &Tensor) -> MemoryLossOracle {
    let (k, v, c) = (keys.dim(0), values.dim(1), keys.dim(1));
    let probs = key_address_loops(features, keys);
    let mut members: Vec<Vec<(f64, usize)>> = vec![Vec::new(); k];
    for (i, p) in probs.iter().enumerate() {
        let mut best = 0;
        for j in 1..k {
            if p[j] > p[best] {
                best = j;
            }
        }
        members[best].push((p[best], i));
    }
    let mut key = 0.0;
    let mut value = 0.0;
    for (j, m) in members.iter_mut().enumerate() {
        if m.is_empty() {
            continue;
        }
        key += euclid((0..c).map(|ch| keys.at(&[j, ch]) - m.iter().map(|&(_, i)| features.at(&[i, ch])).sum::<f64>() / m.len() as f64));
        m.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for (slot, &(_, i)) in m.iter().enumerate().take(v) {
            value += euclid((0..c).map(|ch| values.at(&[j, slot, ch]) - features.at(&[i, ch])));
        }
    }
    let mut ortho = 0.0;
    for a in 0..k {
        for b in 0..k {
            let dot: f64 = (0..c).map(|ch| keys.at(&[a, ch]) * keys.at(&[b, ch])).sum();
            let e = if a == b { 1.0 - dot } else { -dot };
            ortho += e * e;
        }
    }
    let ortho = ortho.sqrt();
    MemoryLossOracle {
        key,
        ortho,
        value,
        total: key + ortho + value,
    }
}

fn inside_bev(b: &Box3D, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.center[0], y - b.center[1]);
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    lx.abs() <= b.size[0] / 2.0 && ly.abs() <= b.size[1] / 2.0
}

/// Rotated BEV IoU by uniform sampling over the joint bounding rectangle.
pub fn monte_carlo_bev_iou(a: &Box3D, b: &Box3D, samples: usize, seed: u64) -> f64 {
    let r = |bx: &Box3D| 0.5 * bx.size[0].hypot(bx.size[1]);
    let lo = [(a.center[0] - r(a)).min(b.center[0] - r(b)), (a.center[1] - r(a)).min(b.center[1] - r(b))];
    let hi = [(a.center[0] + r(a)).max(b.center[0] + r(b)), (a.center[1] + r(a)).max(b.center[1] + r(b))];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut both = 0usize;
    for _ in 0..samples {
        let x = rng.random_range(lo[0]..hi[0]);
        let y = rng.random_range(lo[1]..hi[1]);
        if inside_bev(a, x, y) && inside_bev(b, x, y) {
            both += 1;
        }
    }
    let inter = both as f64 / samples as f64 * (hi[0] - lo[0]) * (hi[1] - lo[1]);
    let union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter;
    inter / union
}

/// Greedy NMS by repeated selection: take the best remaining candidate
/// (lower index on equal scores), then drop every remaining candidate whose
/// IoU with it reaches `threshold`.
pub fn greedy_nms_oracle(dets: &[Detection], threshold: f64, max_keep: usize, iou: impl Fn(&Box3D, &Box3D) -> f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() && kept.len() < max_keep {
        let mut best = 0;
        for (pos, &i) in remaining.iter().enumerate() {
            let b = remaining[best];
            if dets[i].score > dets[b].score || (dets[i].score == dets[b].score && i < b) {
                best = pos;
            }
        }
        let pick = remaining.remove(best);
        kept.push(pick);
        remaining.retain(|&i| iou(&dets[pick].bbox, &dets[i].bbox) < threshold);
    }
    kept
}

/// Every occupied cell within Manhattan `radius`, scanned over all voxels,
/// ordered by (distance, index) and truncated to `max`.
pub fn exhaustive_manhattan(coords: &[[usize; 3]], cell: [i64; 3], radius: usize, max: usize) -> Vec<usize> {
    let mut hits: Vec<(i64, usize)> = coords
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let d: i64 = (0..3).map(|a| (c[a] as i64 - cell[a]).abs()).sum();
            (d <= radius as i64).then_some((d, i))
        })
        .collect();
    hits.sort();
    hits.into_iter().take(max).map(|(_, i)| i).collect()
}
