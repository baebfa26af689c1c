//! Synthetic scenes: points sampled uniformly over box surfaces plus a
//! flat ground-plane clutter layer.

use pillars_core::geometry::Box3D;
use pillars_core::rpn::GroundTruth;
use pillars_core::voxelizer::{PointCloud, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedBox {
    pub center: [f64; 3],
    /// `(l, w, h)`.
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
    pub points: usize,
}

impl PlantedBox {
    pub fn bbox(&self) -> Result<Box3D> {
        Ok(Box3D::new(self.center, self.size, self.yaw)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub boxes: Vec<PlantedBox>,
    pub clutter_points: usize,
    /// Height of the clutter layer; points jitter by `±ground_jitter`.
    pub ground_z: f64,
    pub ground_jitter: f64,
}

impl SynthSpec {
    /// A single 4 × 2 × 1.5 car-sized box resting on the ground at `center`.
    pub fn single_box(center: [f64; 2], points: usize, clutter_points: usize) -> Self {
        Self {
            boxes: vec![PlantedBox {
                center: [center[0], center[1], -1.0],
                size: [4.0, 2.0, 1.5],
                yaw: 0.0,
                class_id: 0,
                points,
            }],
            clutter_points,
            ground_z: -1.75,
            ground_jitter: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub cloud: PointCloud,
    pub ground_truth: Vec<GroundTruth>,
}

/// Uniform sample on the surface of `b`: faces are picked by area.
pub fn sample_surface(rng: &mut impl Rng, b: &Box3D) -> [f64; 3] {
    let [l, w, h] = b.size;
    let areas = [w * h, w * h, l * h, l * h, l * w, l * w];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random_range(0.0..total);
    let mut face = 5;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let mut u = |half: f64| rng.random_range(-half..=half);
    let (hl, hw, hh) = (l / 2.0, w / 2.0, h / 2.0);
    let local = match face {
        0 => [-hl, u(hw), u(hh)],
        1 => [hl, u(hw), u(hh)],
        2 => [u(hl), -hw, u(hh)],
        3 => [u(hl), hw, u(hh)],
        4 => [u(hl), u(hw), -hh],
        _ => [u(hl), u(hw), hh],
    };
    b.to_world(local)
}

fn inside_range(p: [f64; 3], scene: &SceneConfig) -> bool {
    let (lo, hi) = (scene.min(), scene.max());
    (0..3).all(|a| p[a] >= lo[a] && p[a] < hi[a])
}

pub fn synth_scene(spec: &SynthSpec, scene: &SceneConfig, seed: u64) -> Result<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut ground_truth = Vec::with_capacity(spec.boxes.len());
    for (i, pb) in spec.boxes.iter().enumerate() {
        let b = pb.bbox()?;
        let corners = b.bev_corners();
        let all_in = corners
            .iter()
            .flat_map(|c| [[c[0], c[1], b.bottom()], [c[0], c[1], b.top()]])
            .all(|p| inside_range(p, scene));
        if !all_in {
            return Err(HarnessError::Input(format!("box {i} at {:?} extends outside the scene range", pb.center)));
        }
        for _ in 0..pb.points {
            let p = sample_surface(&mut rng, &b);
            points.push([p[0], p[1], p[2], rng.random_range(0.0..1.0)]);
        }
        ground_truth.push(GroundTruth { bbox: b, class_id: pb.class_id });
    }
    let z = [spec.ground_z - spec.ground_jitter, spec.ground_z + spec.ground_jitter];
    if spec.clutter_points > 0 && !(inside_range([scene.range_x.0, scene.range_y.0, z[0]], scene) && z[1] < scene.range_z.1) {
        return Err(HarnessError::Input(format!("ground layer at z = {} is outside the scene range", spec.ground_z)));
    }
    for _ in 0..spec.clutter_points {
        let x = rng.random_range(scene.range_x.0..scene.range_x.1);
        let y = rng.random_range(scene.range_y.0..scene.range_y.1);
        let zz = if spec.ground_jitter > 0.0 { rng.random_range(z[0]..z[1]) } else { spec.ground_z };
        points.push([x, y, zz, rng.random_range(0.0..0.3)]);
    }
    Ok(SynthScene {
        cloud: PointCloud::new(points)?,
        ground_truth,
    })
}
