//! Point clouds, voxel assignment with per-point augmentation, and the
//! scatter/gather bridge between sparse voxel features and dense volumes.
//!
//! Axes are X forward, Y lateral, Z up. Index triples are always `(ix, iy, iz)`;
//! dense volumes are laid out `(C, Z, Y, X)`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Width of the augmented per-point feature.
pub const POINT_FEATURES: usize = 10;

/// Scene extent, voxel size and caps.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub range_x: (f64, f64),
    pub range_y: (f64, f64),
    pub range_z: (f64, f64),
    /// `(v_x, v_y, v_z)` in meters.
    pub voxel_size: [f64; 3],
    pub max_points_per_voxel: usize,
    pub max_voxels: usize,
}

impl SceneConfig {
    /// Full KITTI range: 440 × 500 × 16 voxels.
    pub fn kitti() -> Self {
        Self {
            range_x: (0.0, 70.4),
            range_y: (-40.0, 40.0),
            range_z: (-3.0, 1.0),
            voxel_size: [0.16, 0.16, 0.25],
            max_points_per_voxel: 32,
            max_voxels: 16000,
        }
    }

    /// Reduced range (128 × 128 × 16 voxels) with KITTI voxel sizes, for
    /// end-to-end runs on a single CPU core.
    pub fn desk() -> Self {
        Self {
            range_x: (0.0, 20.48),
            range_y: (-10.24, 10.24),
            range_z: (-3.0, 1.0),
            ..Self::kitti()
        }
    }

    pub fn min(&self) -> [f64; 3] {
        [self.range_x.0, self.range_y.0, self.range_z.0]
    }

    pub fn max(&self) -> [f64; 3] {
        [self.range_x.1, self.range_y.1, self.range_z.1]
    }

    /// Grid size `(X, Y, Z)` after validating the configuration.
    pub fn grid_dims(&self) -> Result<[usize; 3]> {
        let (min, max) = (self.min(), self.max());
        let mut dims = [0; 3];
        for a in 0..3 {
            let v = self.voxel_size[a];
            if !(min[a].is_finite() && max[a].is_finite() && v.is_finite()) {
                return Err(Error::NonFinite("SceneConfig"));
            }
            if max[a] <= min[a] {
                return Err(Error::invalid(format!("range on axis {a} is empty: {} .. {}", min[a], max[a])));
            }
            if v <= 0.0 {
                return Err(Error::invalid(format!("voxel size on axis {a} must be positive")));
            }
            let n = (max[a] - min[a]) / v;
            if (n - n.round()).abs() > 1e-6 {
                return Err(Error::invalid(format!("extent on axis {a} is not a multiple of the voxel size ({n} cells)")));
            }
            dims[a] = n.round() as usize;
        }
        if self.max_points_per_voxel == 0 || self.max_voxels == 0 {
            return Err(Error::invalid("voxel caps must be positive"));
        }
        Ok(dims)
    }

    /// Voxel containing `p`, or `None` when outside the half-open range.
    pub fn voxel_index(&self, p: [f64; 3], dims: [usize; 3]) -> Option<[usize; 3]> {
        let min = self.min();
        let mut idx = [0; 3];
        for a in 0..3 {
            let u = ((p[a] - min[a]) / self.voxel_size[a]).floor();
            if !(u >= 0.0) || u >= dims[a] as f64 {
                return None;
            }
            idx[a] = u as usize;
        }
        Some(idx)
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> [f64; 3] {
        let min = self.min();
        [0, 1, 2].map(|a| min[a] + (idx[a] as f64 + 0.5) * self.voxel_size[a])
    }
}

/// Raw LiDAR returns `(x, y, z, reflectance)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 4]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("PointCloud"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 4]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Parses a KITTI velodyne buffer: little-endian `f32` quadruplets, no header.
    pub fn from_kitti_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 16 != 0 {
            return Err(Error::MalformedBin(format!("length {} is not a multiple of 16 bytes", bytes.len())));
        }
        let points = bytes
            .chunks_exact(16)
            .map(|rec| {
                let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4-byte slice")) as f64;
                [f(0), f(1), f(2), f(3)]
            })
            .collect();
        Self::new(points).map_err(|_| Error::MalformedBin("non-finite coordinate".into()))
    }

    pub fn read_kitti_bin(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kitti_bytes(&std::fs::read(path)?)
    }

    /// Serializes as KITTI `.bin` (values rounded to `f32`).
    pub fn to_kitti_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * 16);
        for p in &self.points {
            for v in p {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn write_kitti_bin(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_kitti_bytes())?;
        Ok(())
    }
}

/// Sparse occupied voxels with their augmented point sets.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelizedScene {
    /// `(ix, iy, iz)` per voxel, unique, in first-encountered order.
    pub coords: Vec<[usize; 3]>,
    /// `(N, max_points_per_voxel, 10)`; rows at or beyond `counts[n]` are zero.
    pub features: Tensor,
    pub counts: Vec<usize>,
    /// Grid size `(X, Y, Z)`.
    pub grid_dims: [usize; 3],
}

impl VoxelizedScene {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn max_points(&self) -> usize {
        self.features.dim(1)
    }

    /// Valid point rows of voxel `n`.
    pub fn points_of(&self, n: usize) -> impl Iterator<Item = &[f64]> {
        let p = self.max_points();
        let base = n * p * POINT_FEATURES;
        let data = &self.features.data()[base..base + p * POINT_FEATURES];
        data.chunks_exact(POINT_FEATURES).take(self.counts[n])
    }
}

/// Assigns points to voxels, keeping the first `max_points_per_voxel` points
/// of each voxel and the first `max_voxels` voxels encountered.
///
/// Each retained point becomes `(x, y, z, r, x − x̄, y − ȳ, z − z̄, x − c_x,
/// y − c_y, z − c_z)` with `x̄` the mean of the voxel's retained points and
/// `c` the voxel center.
pub fn voxelize(cloud: &PointCloud, cfg: &SceneConfig) -> Result<VoxelizedScene> {
    let dims = cfg.grid_dims()?;
    let cap = cfg.max_points_per_voxel;
    let mut slot: HashMap<[usize; 3], usize> = HashMap::new();
    let mut coords = Vec::new();
    let mut members: Vec<Vec<[f64; 4]>> = Vec::new();
    for p in cloud.points() {
        let Some(idx) = cfg.voxel_index([p[0], p[1], p[2]], dims) else {
            continue;
        };
        let n = match slot.get(&idx) {
            Some(&n) => n,
            None if coords.len() < cfg.max_voxels => {
                slot.insert(idx, coords.len());
                coords.push(idx);
                members.push(Vec::with_capacity(4));
                coords.len() - 1
            }
            None => continue,
        };
        if members[n].len() < cap {
            members[n].push(*p);
        }
    }

    let mut features = Tensor::zeros(&[coords.len(), cap, POINT_FEATURES]);
    let data = features.data_mut();
    for (n, pts) in members.iter().enumerate() {
        let k = pts.len() as f64;
        let mean = [0, 1, 2].map(|a| pts.iter().map(|p| p[a]).sum::<f64>() / k);
        let c = cfg.voxel_center(coords[n]);
        for (i, p) in pts.iter().enumerate() {
            let row = &mut data[(n * cap + i) * POINT_FEATURES..(n * cap + i + 1) * POINT_FEATURES];
            row.copy_from_slice(&[
                p[0],
                p[1],
                p[2],
                p[3],
                p[0] - mean[0],
                p[1] - mean[1],
                p[2] - mean[2],
                p[0] - c[0],
                p[1] - c[1],
                p[2] - c[2],
            ]);
        }
    }
    Ok(VoxelizedScene {
        counts: members.iter().map(Vec::len).collect(),
        coords,
        features,
        grid_dims: dims,
    })
}

fn check_coord(c: [usize; 3], dims: [usize; 3]) -> Result<()> {
    if (0..3).any(|a| c[a] >= dims[a]) {
        return Err(Error::OutOfGrid { coord: c, dims });
    }
    Ok(())
}

/// Dense volume `(D, Z, Y, X)` and its occupancy mask (`Z·Y·X`, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct Scattered {
    pub volume: Tensor,
    pub mask: Vec<bool>,
}

/// Writes row `n` of `features` (`(N, D)`) at `coords[n]`; all other cells are zero.
pub fn scatter(features: &Tensor, coords: &[[usize; 3]], grid_dims: [usize; 3]) -> Result<Scattered> {
    if features.rank() != 2 {
        return Err(Error::shape("scatter", "feature rank", 2, features.rank()));
    }
    if features.dim(0) != coords.len() {
        return Err(Error::shape("scatter", "rows", coords.len(), features.dim(0)));
    }
    let d = features.dim(1);
    let [x, y, z] = grid_dims;
    let plane = x * y * z;
    let mut volume = Tensor::zeros(&[d, z, y, x]);
    let mut mask = vec![false; plane];
    let out = volume.data_mut();
    for (n, &c) in coords.iter().enumerate() {
        check_coord(c, grid_dims)?;
        let cell = (c[2] * y + c[1]) * x + c[0];
        if std::mem::replace(&mut mask[cell], true) {
            return Err(Error::DuplicateCoordinate(c));
        }
        for (ch, v) in features.row(n).iter().enumerate() {
            out[ch * plane + cell] = *v;
        }
    }
    Ok(Scattered { volume, mask })
}

/// Reads `(N, D)` features back from a `(D, Z, Y, X)` volume.
pub fn gather(volume: &Tensor, coords: &[[usize; 3]]) -> Result<Tensor> {
    if volume.rank() != 4 {
        return Err(Error::shape("gather", "volume rank", 4, volume.rank()));
    }
    let s = volume.shape();
    let (d, dims) = (s[0], [s[3], s[2], s[1]]);
    let plane = dims[0] * dims[1] * dims[2];
    let mut out = Vec::with_capacity(coords.len() * d);
    for &c in coords {
        check_coord(c, dims)?;
        let cell = (c[2] * dims[1] + c[1]) * dims[0] + c[0];
        out.extend((0..d).map(|ch| volume.data()[ch * plane + cell]));
    }
    Tensor::new(vec![coords.len(), d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> SceneConfig {
        SceneConfig {
            range_x: (0.0, 4.0),
            range_y: (-2.0, 2.0),
            range_z: (-1.0, 1.0),
            voxel_size: [0.5, 0.5, 0.5],
            max_points_per_voxel: 4,
            max_voxels: 1000,
        }
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-0.5..4.5),
                        rng.random_range(-2.5..2.5),
                        rng.random_range(-1.2..1.2),
                        rng.random_range(0.0..1.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn kitti_grid_dims() {
        assert_eq!(SceneConfig::kitti().grid_dims().unwrap(), [440, 500, 16]);
        assert_eq!(SceneConfig::desk().grid_dims().unwrap(), [128, 128, 16]);
    }

    #[test]
    fn rejects_non_divisible_extent() {
        let cfg = SceneConfig {
            voxel_size: [0.3, 0.16, 0.25],
            ..SceneConfig::kitti()
        };
        assert!(cfg.grid_dims().is_err());
    }

    #[test]
    fn single_point_kitti() {
        let cloud = PointCloud::new(vec![[10.0, 0.0, -1.0, 0.5]]).unwrap();
        let s = voxelize(&cloud, &SceneConfig::kitti()).unwrap();
        assert_eq!(s.coords, vec![[62, 250, 8]]);
        assert_eq!(s.counts, vec![1]);
        let row: Vec<f64> = s.points_of(0).next().unwrap().to_vec();
        assert_eq!(&row[..4], &[10.0, 0.0, -1.0, 0.5]);
        assert_eq!(&row[4..7], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn out_of_range_point_is_dropped() {
        let cloud = PointCloud::new(vec![[80.0, 0.0, -1.0, 0.5], [70.4, 0.0, 0.0, 0.0]]).unwrap();
        let s = voxelize(&cloud, &SceneConfig::kitti()).unwrap();
        assert!(s.is_empty());
        assert!(voxelize(&PointCloud::default(), &SceneConfig::kitti()).unwrap().is_empty());
    }

    #[test]
    fn caps_keep_first_arrivals() {
        let mut cfg = small_cfg();
        cfg.max_points_per_voxel = 2;
        cfg.max_voxels = 1;
        let cloud = PointCloud::new(vec![
            [0.1, 0.1, 0.1, 1.0],
            [3.0, 1.0, 0.0, 0.0],
            [0.2, 0.1, 0.1, 2.0],
            [0.3, 0.1, 0.1, 3.0],
        ])
        .unwrap();
        let s = voxelize(&cloud, &cfg).unwrap();
        assert_eq!(s.counts, vec![2]);
        let r: Vec<f64> = s.points_of(0).map(|p| p[3]).collect();
        assert_eq!(r, vec![1.0, 2.0]);
        assert!(s.features.data()[2 * POINT_FEATURES..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kitti_bin_roundtrip_and_malformed() {
        let cloud = PointCloud::new(vec![[1.5, -2.25, 0.5, 0.125], [3.0, 4.0, -1.0, 1.0]]).unwrap();
        let bytes = cloud.to_kitti_bytes();
        assert_eq!(bytes.len(), 32);
        assert_eq!(PointCloud::from_kitti_bytes(&bytes).unwrap(), cloud);
        assert!(matches!(PointCloud::from_kitti_bytes(&bytes[..31]), Err(Error::MalformedBin(_))));
        assert!(PointCloud::from_kitti_bytes(&[]).unwrap().is_empty());
    }

    #[test]
    fn scatter_examples() {
        let empty = scatter(&Tensor::zeros(&[0, 3]), &[], [2, 2, 2]).unwrap();
        assert!(empty.volume.data().iter().all(|&v| v == 0.0) && empty.mask.iter().all(|&m| !m));
        let f = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = scatter(&f, &[[1, 0, 1]], [2, 3, 2]).unwrap();
        assert_eq!(s.volume.data().iter().filter(|&&v| v != 0.0).count(), 3);
        for ch in 0..3 {
            assert_eq!(s.volume.at(&[ch, 1, 0, 1]), (ch + 1) as f64);
        }
        assert_eq!(gather(&s.volume, &[[1, 0, 1]]).unwrap(), f);
        let dup = Tensor::zeros(&[2, 1]);
        assert!(matches!(scatter(&dup, &[[0, 0, 0], [0, 0, 0]], [1, 1, 1]), Err(Error::DuplicateCoordinate(_))));
        assert!(matches!(gather(&s.volume, &[[2, 0, 0]]), Err(Error::OutOfGrid { .. })));
    }

    proptest! {
        #[test]
        fn points_land_in_their_voxel(seed in any::<u64>(), n in 0usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = SceneConfig { max_points_per_voxel: 1000, ..small_cfg() };
            let cloud = random_cloud(&mut rng, n);
            let s = voxelize(&cloud, &cfg).unwrap();
            let dims = s.grid_dims;
            let mut in_range = 0;
            for p in cloud.points() {
                let Some(idx) = cfg.voxel_index([p[0], p[1], p[2]], dims) else { continue };
                in_range += 1;
                let v = s.coords.iter().position(|&c| c == idx).unwrap();
                prop_assert!(s.points_of(v).any(|row| row[..4] == p[..]));
                let c = cfg.voxel_center(idx);
                for a in 0..3 {
                    prop_assert!((p[a] - c[a]).abs() <= 0.5 * cfg.voxel_size[a] + 1e-12);
                }
            }
            prop_assert_eq!(s.counts.iter().sum::<usize>(), in_range);
        }

        #[test]
        fn capped_counts_never_exceed_in_range(seed in any::<u64>(), n in 0usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = SceneConfig { max_points_per_voxel: 2, max_voxels: 20, ..small_cfg() };
            let cloud = random_cloud(&mut rng, n);
            let s = voxelize(&cloud, &cfg).unwrap();
            let dims = s.grid_dims;
            let in_range = cloud.points().iter().filter(|p| cfg.voxel_index([p[0], p[1], p[2]], dims).is_some()).count();
            prop_assert!(s.counts.iter().sum::<usize>() <= in_range);
            prop_assert!(s.len() <= 20 && s.counts.iter().all(|&c| (1..=2).contains(&c)));
        }

        #[test]
        fn voxel_set_is_permutation_stable(seed in any::<u64>(), n in 0usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = SceneConfig { max_points_per_voxel: 1000, ..small_cfg() };
            let cloud = random_cloud(&mut rng, n);
            let mut shuffled = cloud.points().to_vec();
            shuffled.shuffle(&mut rng);
            let mut a = voxelize(&cloud, &cfg).unwrap().coords;
            let mut b = voxelize(&PointCloud::new(shuffled).unwrap(), &cfg).unwrap().coords;
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn scatter_gather_roundtrip(seed in any::<u64>(), n in 0usize..40, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dims = [5, 4, 3];
            let mut all: Vec<[usize; 3]> = (0..60).map(|i| [i % 5, (i / 5) % 4, i / 20]).collect();
            all.shuffle(&mut rng);
            let coords = &all[..n];
            let f = Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0));
            let s = scatter(&f, coords, dims).unwrap();
            prop_assert_eq!(gather(&s.volume, coords).unwrap(), f);
            let occupied: Vec<[usize; 3]> = all.iter().copied().filter(|c| s.mask[(c[2] * 4 + c[1]) * 5 + c[0]]).collect();
            let g = gather(&s.volume, &occupied).unwrap();
            prop_assert_eq!(scatter(&g, &occupied, dims).unwrap().volume, s.volume);
        }
    }
}
