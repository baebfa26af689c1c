//! Anchor grid, 1×1 detection heads, target assignment, loss and proposal decoding.

use std::f64::consts::FRAC_PI_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{bev_iou, decode_residuals, direction_bin, encode_residuals, nms, Box3D, Detection, IouKind};
use crate::numerics::{
    conv2d, focal_loss, relu_inplace, sigmoid, smooth_l1, softmax_cross_entropy, BatchNorm, Conv2dParams, Tensor,
};

/// Anchor shape and matching thresholds of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorClass {
    pub name: String,
    /// `(l, w, h)` in meters.
    pub size: [f64; 3],
    pub z_center: f64,
    pub matched_threshold: f64,
    pub unmatched_threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    pub classes: Vec<AnchorClass>,
    pub yaws: Vec<f64>,
}

impl Default for AnchorConfig {
    /// Car, pedestrian, cyclist with yaws {0, π/2}.
    fn default() -> Self {
        let class = |name: &str, size, z_center, matched_threshold, unmatched_threshold| AnchorClass {
            name: name.into(),
            size,
            z_center,
            matched_threshold,
            unmatched_threshold,
        };
        Self {
            classes: vec![
                class("Car", [3.9, 1.6, 1.56], -1.0, 0.60, 0.45),
                class("Pedestrian", [0.8, 0.6, 1.73], -0.6, 0.50, 0.35),
                class("Cyclist", [1.76, 0.6, 1.73], -0.6, 0.50, 0.35),
            ],
            yaws: vec![0.0, FRAC_PI_2],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.yaws.is_empty() {
            return Err(Error::invalid("anchor config needs at least one class and one yaw"));
        }
        for c in &self.classes {
            if c.size.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::invalid(format!("anchor sizes for {} must be positive", c.name)));
            }
            if !(c.matched_threshold > c.unmatched_threshold) {
                return Err(Error::invalid(format!("matched threshold for {} must exceed unmatched", c.name)));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Anchors per BEV cell: classes × yaws.
    pub fn anchors_per_cell(&self) -> usize {
        self.classes.len() * self.yaws.len()
    }
}

/// Metric placement of a BEV map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevGrid {
    /// `(Y, X)` cells.
    pub shape: (usize, usize),
    /// `(x_min, y_min)` of cell `(0, 0)`'s corner.
    pub origin: [f64; 2],
    /// `(dx, dy)` cell size in meters.
    pub cell: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub bbox: Box3D,
    pub class_id: usize,
}

/// One anchor per (cell, class, yaw); index `((y·X + x)·classes + c)·yaws + r`.
pub fn generate_anchors(grid: &BevGrid, cfg: &AnchorConfig) -> Result<Vec<Anchor>> {
    cfg.validate()?;
    let (ny, nx) = grid.shape;
    let mut out = Vec::with_capacity(ny * nx * cfg.anchors_per_cell());
    for y in 0..ny {
        let cy = grid.origin[1] + (y as f64 + 0.5) * grid.cell[1];
        for x in 0..nx {
            let cx = grid.origin[0] + (x as f64 + 0.5) * grid.cell[0];
            for (class_id, c) in cfg.classes.iter().enumerate() {
                for &yaw in &cfg.yaws {
                    out.push(Anchor {
                        bbox: Box3D::new([cx, cy, c.z_center], c.size, yaw)?,
                        class_id,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// A 1×1 convolution followed by frozen BN and ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedLayer {
    pub conv: Conv2dParams,
    pub bn: BatchNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpnParams {
    pub shared: Vec<SharedLayer>,
    pub cls: Conv2dParams,
    pub reg: Conv2dParams,
    pub dir: Conv2dParams,
    pub num_classes: usize,
    pub anchors_per_cell: usize,
}

/// Sigmoid bias prior for focal-loss heads: `−ln((1 − π)/π)` with π = 0.01.
pub fn focal_prior_bias() -> f64 {
    -((1.0 - 0.01) / 0.01f64).ln()
}

impl RpnParams {
    pub fn new(shared: Vec<SharedLayer>, cls: Conv2dParams, reg: Conv2dParams, dir: Conv2dParams, cfg: &AnchorConfig) -> Result<Self> {
        let a = cfg.anchors_per_cell();
        let k = cfg.num_classes();
        let c = shared.first().map_or(cls.in_channels(), |l| l.conv.in_channels());
        let mut width = c;
        for l in &shared {
            if l.conv.in_channels() != width || l.conv.kernel() != (1, 1) || l.bn.channels() != l.conv.out_channels() {
                return Err(Error::invalid("rpn shared layers must be chained 1x1 convs with matching BN"));
            }
            width = l.conv.out_channels();
        }
        for (name, head, want) in [("cls", &cls, a * k), ("reg", &reg, 7 * a), ("dir", &dir, 2 * a)] {
            if head.kernel() != (1, 1) || head.in_channels() != width {
                return Err(Error::invalid(format!("rpn {name} head must be a 1x1 conv over {width} channels")));
            }
            if head.out_channels() != want {
                return Err(Error::shape("RpnParams", "head channels", want, head.out_channels()));
            }
        }
        Ok(Self {
            shared,
            cls,
            reg,
            dir,
            num_classes: k,
            anchors_per_cell: a,
        })
    }

    /// He-normal shared layers, Normal(0, 0.01) heads, focal prior on the class bias.
    pub fn seeded(channels: usize, cfg: &AnchorConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let he = Normal::new(0.0, (2.0 / channels as f64).sqrt()).expect("valid std");
        let small = Normal::new(0.0, 0.01).expect("valid std");
        let shared = (0..2)
            .map(|_| {
                let w = Tensor::from_fn(&[channels, channels, 1, 1], |_| he.sample(&mut rng));
                Ok(SharedLayer {
                    conv: Conv2dParams::new(w, None, (1, 1), (0, 0))?,
                    bn: BatchNorm::new(vec![0.0; channels], vec![1.0; channels], vec![1.0; channels], vec![0.0; channels], 1e-3)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let a = cfg.anchors_per_cell();
        let mut head = |out: usize, bias: f64| {
            let w = Tensor::from_fn(&[out, channels, 1, 1], |_| small.sample(&mut rng));
            Conv2dParams::new(w, Some(vec![bias; out]), (1, 1), (0, 0))
        };
        let cls = head(a * cfg.num_classes(), focal_prior_bias())?;
        let reg = head(7 * a, 0.0)?;
        let dir = head(2 * a, 0.0)?;
        Self::new(shared, cls, reg, dir, cfg)
    }

    pub fn in_channels(&self) -> usize {
        self.shared.first().map_or(self.cls.in_channels(), |l| l.conv.in_channels())
    }

    pub fn param_count(&self) -> usize {
        self.shared.iter().map(|l| l.conv.param_count() + l.bn.param_count()).sum::<usize>()
            + self.cls.param_count()
            + self.reg.param_count()
            + self.dir.param_count()
    }
}

/// Head outputs in anchor order.
#[derive(Clone, Debug, PartialEq)]
pub struct RpnOutput {
    /// `num_classes` logits per anchor.
    pub cls: Vec<f64>,
    pub reg: Vec<[f64; 7]>,
    pub dir: Vec<[f64; 2]>,
    pub num_classes: usize,
}

impl RpnOutput {
    pub fn len(&self) -> usize {
        self.reg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reg.is_empty()
    }

    pub fn cls_logits(&self, anchor: usize) -> &[f64] {
        &self.cls[anchor * self.num_classes..(anchor + 1) * self.num_classes]
    }
}

/// Shared 1×1 trunk, then class / box / direction heads, reordered per anchor.
pub fn rpn_heads(bev: &Tensor, params: &RpnParams) -> Result<RpnOutput> {
    if bev.rank() != 3 {
        return Err(Error::shape("rpn_heads", "bev rank", 3, bev.rank()));
    }
    if bev.dim(0) != params.in_channels() {
        return Err(Error::shape("rpn_heads", "bev channels", params.in_channels(), bev.dim(0)));
    }
    let mut x = bev.clone();
    for l in &params.shared {
        x = conv2d(&x, &l.conv)?;
        l.bn.apply_channels_first(x.data_mut())?;
        relu_inplace(x.data_mut());
    }
    let (cls, reg, dir) = (conv2d(&x, &params.cls)?, conv2d(&x, &params.reg)?, conv2d(&x, &params.dir)?);
    let cells = x.dim(1) * x.dim(2);
    let (a, k) = (params.anchors_per_cell, params.num_classes);
    let n = cells * a;
    let mut out = RpnOutput {
        cls: vec![0.0; n * k],
        reg: vec![[0.0; 7]; n],
        dir: vec![[0.0; 2]; n],
        num_classes: k,
    };
    let (cd, rd, dd) = (cls.data(), reg.data(), dir.data());
    for cell in 0..cells {
        for j in 0..a {
            let idx = cell * a + j;
            for c in 0..k {
                out.cls[idx * k + c] = cd[(j * k + c) * cells + cell];
            }
            for t in 0..7 {
                out.reg[idx][t] = rd[(j * 7 + t) * cells + cell];
            }
            for t in 0..2 {
                out.dir[idx][t] = dd[(j * 2 + t) * cells + cell];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnchorTarget {
    pub label: AnchorLabel,
    pub gt: Option<usize>,
}

/// A labelled ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: Box3D,
    pub class_id: usize,
}

/// Class-aware assignment by BEV IoU.
///
/// An anchor is positive when its best same-class IoU reaches the class's
/// matched threshold, negative below the unmatched threshold, ignored in
/// between. In addition, every ground truth with a non-zero best IoU forces
/// its best anchor (lowest index on ties) positive; an anchor forced by
/// several ground truths takes the lowest-index one.
pub fn assign_targets(anchors: &[Anchor], gts: &[GroundTruth], cfg: &AnchorConfig) -> Vec<AnchorTarget> {
    let mut best_iou = vec![0.0f64; anchors.len()];
    let mut best_gt: Vec<Option<usize>> = vec![None; anchors.len()];
    let mut gt_best: Vec<(f64, Option<usize>)> = vec![(0.0, None); gts.len()];
    for (ai, a) in anchors.iter().enumerate() {
        for (gi, g) in gts.iter().enumerate() {
            if g.class_id != a.class_id {
                continue;
            }
            let iou = bev_iou(&a.bbox, &g.bbox);
            if iou > best_iou[ai] {
                best_iou[ai] = iou;
                best_gt[ai] = Some(gi);
            }
            if iou > gt_best[gi].0 {
                gt_best[gi] = (iou, Some(ai));
            }
        }
    }
    let mut out: Vec<AnchorTarget> = anchors
        .iter()
        .enumerate()
        .map(|(ai, a)| {
            let c = &cfg.classes[a.class_id];
            let label = if best_gt[ai].is_some() && best_iou[ai] >= c.matched_threshold {
                AnchorLabel::Positive
            } else if best_iou[ai] < c.unmatched_threshold {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            };
            AnchorTarget {
                label,
                gt: (label == AnchorLabel::Positive).then_some(best_gt[ai]).flatten(),
            }
        })
        .collect();
    for (gi, &(_, anchor)) in gt_best.iter().enumerate().rev() {
        if let Some(ai) = anchor {
            out[ai] = AnchorTarget {
                label: AnchorLabel::Positive,
                gt: Some(gi),
            };
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RpnLossWeights {
    pub reg: f64,
    pub dir: f64,
    pub cls: f64,
    /// Smooth-L1 transition point.
    pub beta: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for RpnLossWeights {
    fn default() -> Self {
        Self {
            reg: 2.0,
            dir: 0.2,
            cls: 1.0,
            beta: 1.0 / 9.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Unweighted term sums, positive count and the normalized weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RpnLoss {
    pub total: f64,
    pub reg: f64,
    pub dir: f64,
    pub cls: f64,
    pub num_positive: usize,
}

pub fn rpn_loss(
    out: &RpnOutput,
    anchors: &[Anchor],
    targets: &[AnchorTarget],
    gts: &[GroundTruth],
    w: &RpnLossWeights,
) -> Result<RpnLoss> {
    if out.len() != anchors.len() || targets.len() != anchors.len() {
        return Err(Error::shape("rpn_loss", "anchors", anchors.len(), out.len().min(targets.len())));
    }
    if out.cls.iter().chain(out.reg.iter().flatten()).chain(out.dir.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rpn_loss predictions"));
    }
    let (mut reg, mut dir, mut cls, mut np) = (0.0, 0.0, 0.0, 0usize);
    for (i, t) in targets.iter().enumerate() {
        let gt_class = match (t.label, t.gt) {
            (AnchorLabel::Ignore, _) => continue,
            (AnchorLabel::Positive, Some(g)) => {
                let gt = &gts[g];
                np += 1;
                let target = encode_residuals(&gt.bbox, &anchors[i].bbox)?;
                reg += out.reg[i].iter().zip(&target).map(|(p, t)| smooth_l1(p - t, w.beta)).sum::<f64>();
                dir += softmax_cross_entropy(&out.dir[i], direction_bin(gt.bbox.yaw) as usize);
                Some(gt.class_id)
            }
            (AnchorLabel::Positive, None) => return Err(Error::invalid(format!("positive anchor {i} has no ground truth"))),
            (AnchorLabel::Negative, _) => None,
        };
        for (k, &logit) in out.cls_logits(i).iter().enumerate() {
            cls += focal_loss(sigmoid(logit), gt_class == Some(k), w.focal_alpha, w.focal_gamma);
        }
    }
    let total = (w.reg * reg + w.dir * dir + w.cls * cls) / np.max(1) as f64;
    if !total.is_finite() {
        return Err(Error::NonFinite("rpn_loss total"));
    }
    Ok(RpnLoss {
        total,
        reg,
        dir,
        cls,
        num_positive: np,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalConfig {
    pub k_pre: usize,
    pub nms_threshold: f64,
    pub k_post: usize,
    pub iou: IouKind,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            k_pre: 512,
            nms_threshold: 0.1,
            k_post: 100,
            iou: IouKind::Bev,
        }
    }
}

/// Scores every anchor by its best class probability, keeps the top `k_pre`
/// (ties by anchor index), decodes them and applies NMS.
pub fn decode_proposals(out: &RpnOutput, anchors: &[Anchor], cfg: &ProposalConfig) -> Result<Vec<Detection>> {
    if out.len() != anchors.len() {
        return Err(Error::shape("decode_proposals", "anchors", anchors.len(), out.len()));
    }
    let scored: Vec<(usize, usize, f64)> = (0..out.len())
        .map(|i| {
            let (k, logit) = out
                .cls_logits(i)
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best });
            (i, k, sigmoid(logit))
        })
        .collect();
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].2.total_cmp(&scored[a].2).then(a.cmp(&b)));
    order.truncate(cfg.k_pre);
    let candidates = order
        .into_iter()
        .map(|j| {
            let (i, class_id, score) = scored[j];
            let bin = u8::from(out.dir[i][1] > out.dir[i][0]);
            Ok(Detection {
                bbox: decode_residuals(&out.reg[i], &anchors[i].bbox, bin)?,
                score,
                class_id,
                direction_bin: bin,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(nms(&candidates, cfg.nms_threshold, cfg.k_post, cfg.iou))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn grid(ny: usize, nx: usize) -> BevGrid {
        BevGrid {
            shape: (ny, nx),
            origin: [0.0, -10.0],
            cell: [0.32, 0.32],
        }
    }

    fn one_class() -> AnchorConfig {
        AnchorConfig {
            classes: vec![AnchorConfig::default().classes[0].clone()],
            yaws: vec![0.0, FRAC_PI_2],
        }
    }

    #[test]
    fn anchor_counts_and_centers() {
        let a = generate_anchors(&grid(1, 1), &one_class()).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].bbox.center[..2], [0.16, -9.84]);
        assert_eq!(a[0].bbox.center, a[1].bbox.center);
        let many = generate_anchors(&grid(250, 220), &AnchorConfig::default()).unwrap();
        assert_eq!(many.len(), 330_000);
        let g = grid(3, 4);
        let a = generate_anchors(&g, &AnchorConfig::default()).unwrap();
        let idx = ((2 * 4 + 1) * 3 + 2) * 2 + 1;
        assert_eq!(a[idx].class_id, 2);
        assert_eq!(a[idx].bbox.yaw, FRAC_PI_2);
        assert!((a[idx].bbox.center[0] - 1.5 * 0.32).abs() < 1e-12);
        assert!((a[idx].bbox.center[1] - (-10.0 + 2.5 * 0.32)).abs() < 1e-12);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_logits() {
        let cfg = AnchorConfig::default();
        let mut p = RpnParams::seeded(8, &cfg, 0).unwrap();
        for h in [&mut p.cls, &mut p.reg, &mut p.dir] {
            *h = Conv2dParams::new(h.weight().clone(), Some(vec![0.0; h.out_channels()]), (1, 1), (0, 0)).unwrap();
        }
        let out = rpn_heads(&Tensor::zeros(&[8, 3, 4]), &p).unwrap();
        assert_eq!(out.len(), 3 * 4 * 6);
        assert_eq!(out.cls.len(), 3 * 4 * 6 * 3);
        assert!(out.cls.iter().chain(out.reg.iter().flatten()).chain(out.dir.iter().flatten()).all(|&v| v == 0.0));
    }

    #[test]
    fn heads_are_local() {
        let cfg = AnchorConfig::default();
        let p = RpnParams::seeded(8, &cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let col: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let place = |y: usize, x: usize| Tensor::from_fn(&[8, 3, 4], |i| if i[1] == y && i[2] == x { col[i[0]] } else { 0.0 });
        let (a, b) = (rpn_heads(&place(0, 1), &p).unwrap(), rpn_heads(&place(2, 3), &p).unwrap());
        let (ca, cb) = (1, 2 * 4 + 3);
        for j in 0..6 {
            assert_eq!(a.reg[ca * 6 + j], b.reg[cb * 6 + j]);
            assert_eq!(a.cls_logits(ca * 6 + j), b.cls_logits(cb * 6 + j));
        }
    }

    #[test]
    fn rpn_heads_rejects_wrong_channels() {
        let p = RpnParams::seeded(8, &AnchorConfig::default(), 0).unwrap();
        assert!(matches!(rpn_heads(&Tensor::zeros(&[7, 2, 2]), &p), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn assignment_examples() {
        let cfg = one_class();
        let anchors = generate_anchors(&grid(4, 4), &cfg).unwrap();
        let gt = GroundTruth {
            bbox: anchors[13].bbox,
            class_id: 0,
        };
        let t = assign_targets(&anchors, &[gt], &cfg);
        assert_eq!(t[13], AnchorTarget { label: AnchorLabel::Positive, gt: Some(0) });
        let none = assign_targets(&anchors, &[], &cfg);
        assert!(none.iter().all(|t| t.label == AnchorLabel::Negative));
    }

    /// Straight transcription of the rules, one anchor at a time.
    fn oracle_assign(anchors: &[Anchor], gts: &[GroundTruth], cfg: &AnchorConfig) -> Vec<AnchorTarget> {
        let iou = |a: usize, g: usize| {
            if anchors[a].class_id == gts[g].class_id {
                bev_iou(&anchors[a].bbox, &gts[g].bbox)
            } else {
                0.0
            }
        };
        let forced = |a: usize| -> Option<usize> {
            (0..gts.len()).find(|&g| {
                let best = (0..anchors.len()).map(|b| iou(b, g)).fold(0.0, f64::max);
                best > 0.0 && (0..anchors.len()).position(|b| iou(b, g) == best) == Some(a)
            })
        };
        (0..anchors.len())
            .map(|a| {
                if let Some(g) = forced(a) {
                    return AnchorTarget { label: AnchorLabel::Positive, gt: Some(g) };
                }
                let best = (0..gts.len()).map(|g| iou(a, g)).fold(0.0, f64::max);
                let c = &cfg.classes[anchors[a].class_id];
                if best > 0.0 && best >= c.matched_threshold {
                    let g = (0..gts.len()).position(|g| iou(a, g) == best);
                    AnchorTarget { label: AnchorLabel::Positive, gt: g }
                } else if best < c.unmatched_threshold {
                    AnchorTarget { label: AnchorLabel::Negative, gt: None }
                } else {
                    AnchorTarget { label: AnchorLabel::Ignore, gt: None }
                }
            })
            .collect()
    }

    fn random_scene(rng: &mut ChaCha8Rng, n_anchors: usize, n_gts: usize) -> (Vec<Anchor>, Vec<GroundTruth>) {
        let cfg = AnchorConfig::default();
        let rbox = |rng: &mut ChaCha8Rng, c: usize| {
            let s = cfg.classes[c].size;
            let j = |rng: &mut ChaCha8Rng| rng.random_range(0.7..1.3);
            Box3D::new([rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), -1.0], [s[0] * j(rng), s[1] * j(rng), s[2]], rng.random_range(-3.0..3.0)).unwrap()
        };
        let anchors = (0..n_anchors)
            .map(|_| {
                let c = rng.random_range(0..2);
                Anchor { bbox: rbox(rng, c), class_id: c }
            })
            .collect();
        let gts = (0..n_gts)
            .map(|_| {
                let c = rng.random_range(0..2);
                GroundTruth { bbox: rbox(rng, c), class_id: c }
            })
            .collect();
        (anchors, gts)
    }

    #[test]
    fn assignment_matches_rule_oracle_five_by_two() {
        let cfg = AnchorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let (a, g) = random_scene(&mut rng, 5, 2);
            assert_eq!(assign_targets(&a, &g, &cfg), oracle_assign(&a, &g, &cfg));
        }
    }

    fn perfect_output(anchors: &[Anchor], targets: &[AnchorTarget], gts: &[GroundTruth], k: usize) -> RpnOutput {
        let mut out = RpnOutput {
            cls: vec![-40.0; anchors.len() * k],
            reg: vec![[0.0; 7]; anchors.len()],
            dir: vec![[0.0; 2]; anchors.len()],
            num_classes: k,
        };
        for (i, t) in targets.iter().enumerate() {
            if let Some(g) = t.gt {
                out.reg[i] = encode_residuals(&gts[g].bbox, &anchors[i].bbox).unwrap();
                out.cls[i * k + gts[g].class_id] = 40.0;
                out.dir[i][direction_bin(gts[g].bbox.yaw) as usize] = 40.0;
            }
        }
        out
    }

    #[test]
    fn loss_examples() {
        let cfg = one_class();
        let sparse = BevGrid { shape: (4, 4), origin: [0.0, 0.0], cell: [10.0, 10.0] };
        let anchors = generate_anchors(&sparse, &cfg).unwrap();
        let gts = [GroundTruth { bbox: anchors[9].bbox, class_id: 0 }];
        let t = assign_targets(&anchors, &gts, &cfg);
        let w = RpnLossWeights::default();
        let mut out = perfect_output(&anchors, &t, &gts, 1);
        let l = rpn_loss(&out, &anchors, &t, &gts, &w).unwrap();
        assert!(l.total < 1e-5, "{l:?}");
        assert_eq!(l.num_positive, 1);

        out.reg[9][3] += 2f64.ln();
        let l = rpn_loss(&out, &anchors, &t, &gts, &w).unwrap();
        assert!((l.total - 2.0 * smooth_l1(2f64.ln(), w.beta)).abs() < 1e-5);

        let empty = assign_targets(&anchors, &[], &cfg);
        let l = rpn_loss(&perfect_output(&anchors, &empty, &[], 1), &anchors, &empty, &[], &w).unwrap();
        assert_eq!(l.num_positive, 0);
        assert!(l.total.is_finite() && l.total < 1e-5);
    }

    #[test]
    fn loss_rejects_non_finite() {
        let cfg = one_class();
        let anchors = generate_anchors(&grid(1, 1), &cfg).unwrap();
        let t = assign_targets(&anchors, &[], &cfg);
        let mut out = perfect_output(&anchors, &t, &[], 1);
        out.cls[0] = f64::NAN;
        assert!(rpn_loss(&out, &anchors, &t, &[], &RpnLossWeights::default()).is_err());
    }

    #[test]
    fn proposal_examples() {
        let cfg = one_class();
        let anchors = generate_anchors(&grid(1, 1), &cfg).unwrap();
        let out = RpnOutput {
            cls: vec![0.0],
            reg: vec![[0.0; 7]],
            dir: vec![[0.0; 2]],
            num_classes: 1,
        };
        let single = decode_proposals(&out, &anchors[..1], &ProposalConfig::default()).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].bbox.center, anchors[0].bbox.center);

        let far = BevGrid { shape: (10, 15), origin: [0.0, 0.0], cell: [10.0, 10.0] };
        let anchors: Vec<Anchor> = generate_anchors(&far, &cfg).unwrap().into_iter().step_by(2).collect();
        assert_eq!(anchors.len(), 150);
        let out = RpnOutput {
            cls: (0..150).map(|i| 5.0 - i as f64 * 1e-3).collect(),
            reg: vec![[0.0; 7]; 150],
            dir: vec![[0.0; 2]; 150],
            num_classes: 1,
        };
        let cfg = ProposalConfig { k_pre: 512, ..Default::default() };
        assert_eq!(decode_proposals(&out, &anchors, &cfg).unwrap().len(), 100);
    }

    #[test]
    fn proposals_match_brute_force_decode_and_greedy_nms() {
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(&grid(3, 3), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let out = RpnOutput {
                cls: (0..anchors.len() * 3).map(|_| rng.random_range(-3.0..3.0)).collect(),
                reg: (0..anchors.len()).map(|_| std::array::from_fn(|_| rng.random_range(-0.5..0.5))).collect(),
                dir: (0..anchors.len()).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect(),
                num_classes: 3,
            };
            let pc = ProposalConfig { k_pre: 20, nms_threshold: 0.1, k_post: 5, iou: IouKind::Bev };
            // Repeated selection of the best remaining candidate instead of a sort.
            let mut pool: Vec<(usize, f64, usize)> = (0..anchors.len())
                .map(|i| {
                    let l = out.cls_logits(i);
                    let k = (0..3).fold(0, |b, k| if l[k] > l[b] { k } else { b });
                    (i, 1.0 / (1.0 + (-l[k]).exp()), k)
                })
                .collect();
            let mut top = Vec::new();
            while top.len() < pc.k_pre {
                let j = (0..pool.len()).fold(0, |b, j| if pool[j].1 > pool[b].1 { j } else { b });
                top.push(pool.remove(j));
            }
            let mut kept: Vec<Detection> = Vec::new();
            for (i, score, k) in top {
                let bin = if out.dir[i][1] > out.dir[i][0] { 1 } else { 0 };
                let b = decode_residuals(&out.reg[i], &anchors[i].bbox, bin).unwrap();
                if kept.len() < pc.k_post && kept.iter().all(|d| bev_iou(&d.bbox, &b) < pc.nms_threshold) {
                    kept.push(Detection { bbox: b, score, class_id: k, direction_bin: bin });
                }
            }
            assert_eq!(decode_proposals(&out, &anchors, &pc).unwrap(), kept);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn loss_is_permutation_invariant_and_lambda_linear(seed in any::<u64>(), c in 0.1f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (anchors, gts) = random_scene(&mut rng, 12, 3);
            let cfg = AnchorConfig::default();
            let t = assign_targets(&anchors, &gts, &cfg);
            let out = RpnOutput {
                cls: (0..anchors.len() * 3).map(|_| rng.random_range(-3.0..3.0)).collect(),
                reg: (0..anchors.len()).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect(),
                dir: (0..anchors.len()).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect(),
                num_classes: 3,
            };
            let w = RpnLossWeights::default();
            let base = rpn_loss(&out, &anchors, &t, &gts, &w).unwrap();

            let mut perm: Vec<usize> = (0..anchors.len()).collect();
            perm.shuffle(&mut rng);
            let pa: Vec<Anchor> = perm.iter().map(|&i| anchors[i]).collect();
            let pt: Vec<AnchorTarget> = perm.iter().map(|&i| t[i]).collect();
            let po = RpnOutput {
                cls: perm.iter().flat_map(|&i| out.cls_logits(i).to_vec()).collect(),
                reg: perm.iter().map(|&i| out.reg[i]).collect(),
                dir: perm.iter().map(|&i| out.dir[i]).collect(),
                num_classes: 3,
            };
            prop_assert!((rpn_loss(&po, &pa, &pt, &gts, &w).unwrap().total - base.total).abs() < 1e-12);

            let scaled = RpnLossWeights { reg: c * w.reg, dir: c * w.dir, cls: c * w.cls, ..w };
            let s = rpn_loss(&out, &anchors, &t, &gts, &scaled).unwrap();
            prop_assert_eq!(s.reg, base.reg);
            prop_assert_eq!(s.dir, base.dir);
            prop_assert_eq!(s.cls, base.cls);
            prop_assert!((s.total - c * base.total).abs() <= 1e-12 * base.total.abs().max(1.0));
        }

        #[test]
        fn proposals_stay_near_the_scene(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = AnchorConfig::default();
            let g = grid(4, 5);
            let anchors = generate_anchors(&g, &cfg).unwrap();
            let out = RpnOutput {
                cls: (0..anchors.len() * 3).map(|_| rng.random_range(-3.0..3.0)).collect(),
                reg: (0..anchors.len()).map(|_| std::array::from_fn(|_| rng.random_range(-0.5..0.5))).collect(),
                dir: (0..anchors.len()).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect(),
                num_classes: 3,
            };
            let props = decode_proposals(&out, &anchors, &ProposalConfig::default()).unwrap();
            prop_assert!(!props.is_empty() && props.len() <= 100);
            let diag = cfg.classes.iter().map(|c| c.size[0].hypot(c.size[1])).fold(0.0, f64::max);
            let (x1, y1) = (g.origin[0] + 5.0 * g.cell[0], g.origin[1] + 4.0 * g.cell[1]);
            for p in &props {
                prop_assert!(p.bbox.center[0] >= g.origin[0] - diag && p.bbox.center[0] <= x1 + diag);
                prop_assert!(p.bbox.center[1] >= g.origin[1] - diag && p.bbox.center[1] <= y1 + diag);
            }
        }
    }
}
