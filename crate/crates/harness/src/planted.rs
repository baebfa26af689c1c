//! Hand-set weights that turn the detector into a matched filter for one
//! car-sized box, used to check end-to-end recovery of a planted object.
//!
//! * VFE channel 0 is `relu(z − z_cut)`, so ground clutter never fires.
//! * Every view convolution averages channel 0 over its `k × k` window; all
//!   other channels stay zero.
//! * The neck sums the scale-2 map over height; the other branches are zero.
//! * The RPN passes that channel to the logit of the yaw-0 car anchor and
//!   pins every other logit at −10; box and direction heads are zero.
//! * The RoI head is zero, so refined boxes equal the proposals.
//!
//! The smoothed occupancy peaks at the scale-2 node nearest the box center,
//! and the top proposal is the anchor at that node.

use pillars_core::backbone::Svfm;
use pillars_core::geometry::{iou3d, Box3D, Detection};
use pillars_core::numerics::{BatchNorm, Conv2dParams, Dense, Tensor};
use pillars_core::pipeline::{Detector, DetectorConfig};
use pillars_core::roi_head::{RoiHeadParams, HEAD_WIDTH};
use pillars_core::rpn::{RpnParams, SharedLayer};
use pillars_core::vfe::VfeParams;
use pillars_core::voxelizer::POINT_FEATURES;

use crate::error::{HarnessError, Result};
use crate::synth::{synth_scene, SynthScene, SynthSpec};

/// Heights at or below this cut (the box bottom plus one voxel) are ignored.
pub const Z_CUT: f64 = -1.5;
/// Neck branch carrying the signal.
pub const SIGNAL_SCALE: usize = 1;

fn exact_bn(mean: Vec<f64>) -> BatchNorm {
    let c = mean.len();
    BatchNorm::new(mean, vec![1.0; c], vec![1.0; c], vec![0.0; c], 0.0).expect("valid bn")
}

fn channel0_average(shape: &[usize]) -> Tensor {
    let taps = (shape[2] * shape[3]) as f64;
    Tensor::from_fn(shape, |i| if i[0] == 0 && i[1] == 0 { 1.0 / taps } else { 0.0 })
}

/// Detector with the planted-object weights; S²CFM stays seeded.
pub fn planted_detector(config: DetectorConfig, seed: u64) -> Result<Detector> {
    let mut det = Detector::seeded(config, seed)?;
    let cfg = det.config.clone();

    let d = cfg.vfe_channels;
    let w = Tensor::from_fn(&[d, POINT_FEATURES], |i| f64::from(i[0] == 0 && i[1] == 2));
    let mut mean = vec![0.0; d];
    mean[0] = Z_CUT;
    det.vfe = VfeParams::new(Dense::new(w, None)?, exact_bn(mean))?;

    for (block, bcfg) in det.backbone.blocks.iter_mut().zip(&cfg.backbone.blocks) {
        for (m, svfm) in block.iter_mut().enumerate() {
            let stride = if m == 0 { bcfg.first_stride } else { 1 };
            let weights = [&svfm.bev, &svfm.side, &svfm.front].map(|v| channel0_average(v.conv.weight().shape()));
            let bns = (0..svfm.bns.len()).map(|_| exact_bn(vec![0.0; svfm.out_channels()])).collect();
            *svfm = Svfm::new(svfm.variant, weights, stride, bns)?;
        }
    }
    let depth = |i: usize| -> Result<usize> {
        let shapes = cfg.backbone.output_shapes(cfg.input_shape()?)?;
        Ok(shapes[i][1])
    };
    let z_signal = depth(SIGNAL_SCALE)?;
    for (i, branch) in det.backbone.neck.iter_mut().enumerate() {
        let shape = branch.deconv.weight().shape().to_vec();
        let w = Tensor::from_fn(&shape, |j| f64::from(i == SIGNAL_SCALE && j[0] == 0 && j[1] < z_signal));
        let s = branch.deconv.stride();
        branch.deconv = Conv2dParams::new(w, None, s, (0, 0))?;
        branch.bn = exact_bn(vec![0.0; shape[0]]);
    }

    let c = det.rpn.in_channels();
    let shared = det
        .rpn
        .shared
        .iter()
        .map(|_| SharedLayer {
            conv: Conv2dParams::identity(c),
            bn: exact_bn(vec![0.0; c]),
        })
        .collect();
    let signal = SIGNAL_SCALE * cfg.backbone.neck_channels;
    let n_cls = det.rpn.cls.out_channels();
    let cls_w = Tensor::from_fn(&[n_cls, c, 1, 1], |i| f64::from(i[0] == 0 && i[1] == signal));
    let mut cls_b = vec![-10.0; n_cls];
    cls_b[0] = 0.0;
    let zero_head = |out: usize| Conv2dParams::new(Tensor::zeros(&[out, c, 1, 1]), Some(vec![0.0; out]), (1, 1), (0, 0));
    det.rpn = RpnParams::new(
        shared,
        Conv2dParams::new(cls_w, Some(cls_b), (1, 1), (0, 0))?,
        zero_head(det.rpn.reg.out_channels())?,
        zero_head(det.rpn.dir.out_channels())?,
        &cfg.anchors,
    )?;

    let h = HEAD_WIDTH;
    det.head = RoiHeadParams::new(
        Dense::zeros(cfg.roi_flat_width(), h, true),
        Dense::zeros(h, h, true),
        Dense::zeros(h, 7, true),
        Dense::zeros(h, 1, true),
    )?;
    Ok(det)
}

/// Box center on the scale-2 node nearest the middle of the range.
pub fn planted_center(cfg: &DetectorConfig) -> Result<[f64; 2]> {
    let stride = cfg.backbone.scale_strides()[SIGNAL_SCALE];
    let [gx, gy, _] = cfg.scene.grid_dims()?;
    let min = cfg.scene.min();
    let v = cfg.scene.voxel_size;
    let node = |g: usize| (g / stride / 2 * stride) as f64 + 0.5;
    Ok([min[0] + node(gx) * v[0], min[1] + node(gy) * v[1]])
}

pub struct PlantedRun {
    pub detector: Detector,
    pub scene: SynthScene,
    pub planted: Box3D,
}

/// One 4 × 2 × 1.5 box with `box_points` surface samples and `clutter` ground points.
pub fn planted_setup(config: DetectorConfig, box_points: usize, clutter: usize, seed: u64) -> Result<PlantedRun> {
    let spec = SynthSpec::single_box(planted_center(&config)?, box_points, clutter);
    let scene = synth_scene(&spec, &config.scene, seed)?;
    let planted = scene
        .ground_truth
        .first()
        .map(|g| g.bbox)
        .ok_or_else(|| HarnessError::Input("planted scene has no box".into()))?;
    Ok(PlantedRun {
        detector: planted_detector(config, seed)?,
        scene,
        planted,
    })
}

/// Detections whose 3D IoU with `target` exceeds `threshold`.
pub fn matches(dets: &[Detection], target: &Box3D, threshold: f64) -> usize {
    dets.iter().filter(|d| iou3d(&d.bbox, target) > threshold).count()
}
