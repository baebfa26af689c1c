//! Yaw-rotated 3D boxes: BEV and 3D IoU, greedy NMS, and anchor residuals.

use std::f64::consts::{FRAC_PI_4, PI, TAU};

use crate::error::{Error, Result};

/// Maps an angle into `(−π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Oriented box: `center` (x, y, z) is the geometric center, `size` is
/// (length along heading, width, height), `yaw` is the heading about +Z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self> {
        if center.iter().chain(&size).any(|v| !v.is_finite()) || !yaw.is_finite() {
            return Err(Error::NonFinite("Box3D"));
        }
        if size.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid(format!("box sizes must be positive, got {size:?}")));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_angle(yaw),
        })
    }

    pub fn bottom(&self) -> f64 {
        self.center[2] - 0.5 * self.size[2]
    }

    pub fn top(&self) -> f64 {
        self.center[2] + 0.5 * self.size[2]
    }

    pub fn bev_area(&self) -> f64 {
        self.size[0] * self.size[1]
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// BEV footprint corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (0.5 * self.size[0], 0.5 * self.size[1]);
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]]
            .map(|[u, v]| [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])
    }

    /// Point in the box frame: `(along heading, lateral, vertical)` offsets from the center.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    pub fn to_world(&self, local: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * local[0] - s * local[1],
            self.center[1] + s * local[0] + c * local[1],
            self.center[2] + local[2],
        ]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let l = self.to_local(p);
        (0..3).all(|a| l[a].abs() <= 0.5 * self.size[a])
    }

    /// BEV diagonal `sqrt(l² + w²)`.
    pub fn diagonal(&self) -> f64 {
        self.size[0].hypot(self.size[1])
    }
}

/// A scored, classed box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
    pub class_id: usize,
    pub direction_bin: u8,
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        s += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * s.abs()
}

/// Sutherland–Hodgman: clips `subject` by the convex counter-clockwise `clip`.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (dc, dp) = (cross(a, b, cur), cross(a, b, prev));
            if dc >= 0.0 {
                if dp < 0.0 {
                    out.push(intersect(prev, cur, dp, dc));
                }
                out.push(cur);
            } else if dp >= 0.0 {
                out.push(intersect(prev, cur, dp, dc));
            }
        }
    }
    out
}

fn intersect(p: [f64; 2], q: [f64; 2], dp: f64, dq: f64) -> [f64; 2] {
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

const DEGENERATE_AREA: f64 = 1e-12;

/// Area of the intersection of the two BEV footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    if a.bev_area() < DEGENERATE_AREA || b.bev_area() < DEGENERATE_AREA {
        return 0.0;
    }
    let dx = a.center[0] - b.center[0];
    let dy = a.center[1] - b.center[1];
    let r = 0.5 * (a.diagonal() + b.diagonal());
    if dx * dx + dy * dy > r * r {
        return 0.0;
    }
    polygon_area(&clip_polygon(&a.bev_corners(), &b.bev_corners()))
}

fn ratio(inter: f64, union: f64) -> f64 {
    if union <= 0.0 || !(inter > 0.0) {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    ratio(inter, a.bev_area() + b.bev_area() - inter)
}

pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let dz = (a.top().min(b.top()) - a.bottom().max(b.bottom())).max(0.0);
    if dz == 0.0 || a.volume() < DEGENERATE_AREA || b.volume() < DEGENERATE_AREA {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    ratio(inter, a.volume() + b.volume() - inter)
}

/// Which overlap measure NMS and target assignment use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum IouKind {
    #[default]
    Bev,
    ThreeD,
}

impl IouKind {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            IouKind::Bev => bev_iou(a, b),
            IouKind::ThreeD => iou3d(a, b),
        }
    }
}

/// Indices kept by greedy NMS, in score-descending order (ties by lower index).
pub fn nms_indices(candidates: &[Detection], iou_threshold: f64, max_keep: usize, kind: IouKind) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| candidates[j].score.total_cmp(&candidates[i].score).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= max_keep {
            break;
        }
        if kept.iter().all(|&k| kind.iou(&candidates[k].bbox, &candidates[i].bbox) < iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(candidates: &[Detection], iou_threshold: f64, max_keep: usize, kind: IouKind) -> Vec<Detection> {
    nms_indices(candidates, iou_threshold, max_keep, kind)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

/// Heading half-turn classifier target: bin 1 iff `(yaw − π/4) mod 2π ∈ [0, π)`.
///
/// `direction_bin(yaw + π) == 1 − direction_bin(yaw)` for every yaw, which is
/// what lets the bin undo the half-turn ambiguity of the sine residual.
pub fn direction_bin(yaw: f64) -> u8 {
    u8::from((yaw - FRAC_PI_4).rem_euclid(TAU) < PI)
}

/// Wraps an angle into `[−π/2, π/2]` by adding a multiple of π.
fn wrap_half_turn(a: f64) -> f64 {
    a - PI * (a / PI).round()
}

/// Residuals `(Δx, Δy, Δz, Δl, Δw, Δh, Δθ)` of `gt` relative to `anchor`.
///
/// `Δθ = sin(d)` where `d` is the yaw difference reduced by a multiple of π
/// into `[−π/2, π/2]`; the reduced half-turn is carried by [`direction_bin`].
pub fn encode_residuals(gt: &Box3D, anchor: &Box3D) -> Result<[f64; 7]> {
    if gt.size.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid(format!("ground-truth sizes must be positive, got {:?}", gt.size)));
    }
    if anchor.size.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid(format!("anchor sizes must be positive, got {:?}", anchor.size)));
    }
    let d = anchor.diagonal();
    Ok([
        (gt.center[0] - anchor.center[0]) / d,
        (gt.center[1] - anchor.center[1]) / d,
        (gt.center[2] - anchor.center[2]) / anchor.size[2],
        (gt.size[0] / anchor.size[0]).ln(),
        (gt.size[1] / anchor.size[1]).ln(),
        (gt.size[2] / anchor.size[2]).ln(),
        wrap_half_turn(gt.yaw - anchor.yaw).sin(),
    ])
}

/// Inverse of [`encode_residuals`]; `direction_bin` picks the heading half-turn.
pub fn decode_residuals(delta: &[f64; 7], anchor: &Box3D, direction_bin_target: u8) -> Result<Box3D> {
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decode_residuals delta"));
    }
    let d = anchor.diagonal();
    let mut yaw = anchor.yaw + delta[6].clamp(-1.0, 1.0).asin();
    if direction_bin(yaw) != direction_bin_target {
        yaw += PI;
    }
    Box3D::new(
        [
            anchor.center[0] + delta[0] * d,
            anchor.center[1] + delta[1] * d,
            anchor.center[2] + delta[2] * anchor.size[2],
        ],
        [
            anchor.size[0] * delta[3].exp(),
            anchor.size[1] * delta[4].exp(),
            anchor.size[2] * delta[5].exp(),
        ],
        yaw,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, yaw: f64) -> Box3D {
        Box3D::new([x, y, z], [l, w, h], yaw).unwrap()
    }

    fn random_box(rng: &mut ChaCha8Rng, spread: f64) -> Box3D {
        bx(
            rng.random_range(-spread..spread),
            rng.random_range(-spread..spread),
            rng.random_range(-1.0..1.0),
            rng.random_range(0.3..5.0),
            rng.random_range(0.3..3.0),
            rng.random_range(0.3..2.0),
            rng.random_range(-PI..PI),
        )
    }

    /// Monte-Carlo estimate of BEV IoU by uniform sampling over the joint bounding square.
    fn mc_bev_iou(a: &Box3D, b: &Box3D, n: usize, rng: &mut ChaCha8Rng) -> f64 {
        let r = a.diagonal().max(b.diagonal());
        let (lo_x, hi_x) = (a.center[0].min(b.center[0]) - r, a.center[0].max(b.center[0]) + r);
        let (lo_y, hi_y) = (a.center[1].min(b.center[1]) - r, a.center[1].max(b.center[1]) + r);
        let (mut ia, mut ib, mut both) = (0usize, 0usize, 0usize);
        for _ in 0..n {
            let p = [rng.random_range(lo_x..hi_x), rng.random_range(lo_y..hi_y), 0.0];
            let inside = |bb: &Box3D| {
                let l = bb.to_local([p[0], p[1], bb.center[2]]);
                l[0].abs() <= 0.5 * bb.size[0] && l[1].abs() <= 0.5 * bb.size[1]
            };
            let (x, y) = (inside(a), inside(b));
            ia += usize::from(x);
            ib += usize::from(y);
            both += usize::from(x && y);
        }
        let union = ia + ib - both;
        if union == 0 {
            0.0
        } else {
            both as f64 / union as f64
        }
    }

    #[test]
    fn normalize_angle_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(normalize_angle(0.0), 0.0);
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(bev_iou(&a, &bx(100.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0)), 0.0);
        let b = bx(1.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!((mc_bev_iou(&a, &b, 200_000, &mut rng) - 1.0 / 3.0).abs() < 5e-3);
    }

    #[test]
    fn iou3d_examples() {
        let a = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.3);
        assert!((iou3d(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(iou3d(&a, &bx(0.0, 0.0, 5.0, 1.0, 1.0, 1.0, 0.3)), 0.0);
        let b = bx(0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 0.3);
        assert!((iou3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_has_zero_iou() {
        let a = Box3D {
            center: [0.0; 3],
            size: [1e-8, 1e-8, 1.0],
            yaw: 0.0,
        };
        let b = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        assert_eq!(bev_iou(&a, &b), 0.0);
        assert_eq!(bev_iou(&a, &a), 0.0);
    }

    #[test]
    fn rotated_iou_near_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let a = random_box(&mut rng, 1.0);
            let b = random_box(&mut rng, 1.0);
            let mc = mc_bev_iou(&a, &b, 200_000, &mut rng);
            assert!((bev_iou(&a, &b) - mc).abs() < 1e-2);
        }
    }

    fn det(b: Box3D, score: f64) -> Detection {
        Detection {
            bbox: b,
            score,
            class_id: 0,
            direction_bin: 0,
        }
    }

    #[test]
    fn nms_examples() {
        let a = bx(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0);
        assert_eq!(nms(&[det(a, 0.4)], 0.1, 100, IouKind::Bev).len(), 1);
        let kept = nms(&[det(a, 0.8), det(a, 0.9)], 0.1, 100, IouKind::Bev);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        assert!(nms(&[], 0.1, 100, IouKind::Bev).is_empty());
    }

    #[test]
    fn nms_ties_prefer_lower_index() {
        let a = bx(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0);
        let b = bx(0.5, 0.0, 0.0, 4.0, 2.0, 1.5, 0.0);
        assert_eq!(nms_indices(&[det(a, 0.5), det(b, 0.5)], 0.1, 10, IouKind::Bev), vec![0]);
        assert_eq!(nms_indices(&[det(b, 0.5), det(a, 0.5)], 0.1, 10, IouKind::Bev), vec![0]);
    }

    #[test]
    fn residual_examples() {
        let a = bx(1.0, 2.0, -1.0, 3.9, 1.6, 1.56, 0.0);
        assert_eq!(encode_residuals(&a, &a).unwrap(), [0.0; 7]);
        let g = bx(1.0, 2.0, -1.0, 7.8, 1.6, 1.56, 0.0);
        let d = encode_residuals(&g, &a).unwrap();
        assert!((d[3] - 2f64.ln()).abs() < 1e-15);
        assert!(d.iter().enumerate().all(|(i, v)| i == 3 || *v == 0.0));
        let back = decode_residuals(&d, &a, direction_bin(g.yaw)).unwrap();
        assert!((back.size[0] - 7.8).abs() < 1e-12);
        let same = decode_residuals(&[0.0; 7], &a, direction_bin(a.yaw)).unwrap();
        assert_eq!(same, a);
    }

    #[test]
    fn encode_rejects_bad_sizes() {
        let a = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let g = Box3D {
            center: [0.0; 3],
            size: [0.0, 1.0, 1.0],
            yaw: 0.0,
        };
        assert!(encode_residuals(&g, &a).is_err());
        assert!(decode_residuals(&[f64::NAN; 7], &a, 0).is_err());
    }

    #[test]
    fn roundtrip_thousand_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let g = random_box(&mut rng, 30.0);
            let a = random_box(&mut rng, 30.0);
            let back = decode_residuals(&encode_residuals(&g, &a).unwrap(), &a, direction_bin(g.yaw)).unwrap();
            for i in 0..3 {
                assert!((back.center[i] - g.center[i]).abs() < 1e-10);
                assert!((back.size[i] - g.size[i]).abs() < 1e-10);
            }
            assert!(normalize_angle(back.yaw - g.yaw).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn bev_iou_symmetric_and_rigid_invariant(
            seed in any::<u64>(), tx in -50.0f64..50.0, ty in -50.0f64..50.0, rot in -PI..PI,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_box(&mut rng, 2.0);
            let b = random_box(&mut rng, 2.0);
            let iou = bev_iou(&a, &b);
            prop_assert!((iou - bev_iou(&b, &a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&iou));
            let (s, c) = rot.sin_cos();
            let mv = |bb: &Box3D| bx(
                c * bb.center[0] - s * bb.center[1] + tx,
                s * bb.center[0] + c * bb.center[1] + ty,
                bb.center[2], bb.size[0], bb.size[1], bb.size[2], bb.yaw + rot,
            );
            prop_assert!((bev_iou(&mv(&a), &mv(&b)) - iou).abs() < 1e-9);
        }

        #[test]
        fn direction_bin_flips_under_half_turn(yaw in -10.0f64..10.0) {
            prop_assert_eq!(direction_bin(yaw + PI), 1 - direction_bin(yaw));
        }

        #[test]
        fn nms_survivors_are_separated(seed in any::<u64>(), n in 0usize..10, thr in 0.05f64..0.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c: Vec<Detection> = (0..n).map(|_| det(random_box(&mut rng, 3.0), rng.random_range(0.0..1.0))).collect();
            let kept = nms(&c, thr, 100, IouKind::Bev);
            for i in 0..kept.len() {
                prop_assert!(c.contains(&kept[i]));
                for j in i + 1..kept.len() {
                    prop_assert!(bev_iou(&kept[i].bbox, &kept[j].bbox) < thr);
                    prop_assert!(kept[i].score >= kept[j].score);
                }
            }
            let mut shuffled = c.clone();
            shuffled.reverse();
            prop_assert_eq!(nms(&shuffled, thr, 100, IouKind::Bev), kept);
        }
    }
}
