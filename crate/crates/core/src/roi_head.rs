//! Second stage: an FC trunk over context-aware RoI features with box and
//! confidence branches, its training loss, and proposal refinement.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{decode_residuals, encode_residuals, iou3d, nms, Detection, IouKind};
use crate::numerics::{binary_cross_entropy, sigmoid, smooth_l1, Dense, Tensor};
use crate::rpn::GroundTruth;
use crate::s2cfm::{context_aware_roi, MemoryModule, RoiPoolConfig, RoiPoolParams, RoiPooler, SparseSceneFeature};

pub const HEAD_WIDTH: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct RoiHeadParams {
    pub fc1: Dense,
    pub fc2: Dense,
    pub reg: Dense,
    pub conf: Dense,
}

impl RoiHeadParams {
    pub fn new(fc1: Dense, fc2: Dense, reg: Dense, conf: Dense) -> Result<Self> {
        if fc2.in_dim() != fc1.out_dim() || reg.in_dim() != fc2.out_dim() || conf.in_dim() != fc2.out_dim() {
            return Err(Error::invalid("roi head layers must chain"));
        }
        if reg.out_dim() != 7 || conf.out_dim() != 1 {
            return Err(Error::invalid("roi head branches must output 7 residuals and 1 logit"));
        }
        Ok(Self { fc1, fc2, reg, conf })
    }

    /// He-normal trunk, Normal(0, 0.01) branches, zero biases.
    pub fn seeded(in_dim: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dense = |i: usize, o: usize, std: f64| {
            let n = Normal::new(0.0, std).expect("valid std");
            Dense::new(Tensor::from_fn(&[o, i], |_| n.sample(&mut rng)), Some(vec![0.0; o])).expect("rank 2")
        };
        let fc1 = dense(in_dim, width, (2.0 / in_dim as f64).sqrt());
        let fc2 = dense(width, width, (2.0 / width as f64).sqrt());
        let reg = dense(width, 7, 0.01);
        let conf = dense(width, 1, 0.01);
        Self::new(fc1, fc2, reg, conf).expect("chained widths")
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim()
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count() + self.reg.param_count() + self.conf.param_count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Refinement {
    pub delta: [f64; 7],
    pub logit: f64,
}

/// Refines a batch of flattened context features `(P, T³·2C)`.
pub fn refine_batch(ctx: &Tensor, params: &RoiHeadParams) -> Result<Vec<Refinement>> {
    if ctx.rank() != 2 || ctx.dim(1) != params.in_dim() {
        return Err(Error::shape("refine", "flattened roi width", params.in_dim(), ctx.shape().last().copied().unwrap_or(0)));
    }
    let h = params.fc2.forward_relu(&params.fc1.forward_relu(ctx)?)?;
    let reg = params.reg.forward(&h)?;
    let conf = params.conf.forward(&h)?;
    Ok((0..ctx.dim(0))
        .map(|p| Refinement {
            delta: std::array::from_fn(|j| reg.at(&[p, j])),
            logit: conf.at(&[p, 0]),
        })
        .collect())
}

/// Refines one `(T³, 2C)` context feature.
pub fn refine(roi_ctx: &Tensor, params: &RoiHeadParams) -> Result<Refinement> {
    let flat = roi_ctx.clone().reshape(&[1, roi_ctx.len()])?;
    Ok(refine_batch(&flat, params)?[0])
}

/// `clamp((iou − θ_L) / (θ_H − θ_L), 0, 1)`.
pub fn confidence_target(iou: f64, theta_low: f64, theta_high: f64) -> f64 {
    ((iou - theta_low) / (theta_high - theta_low)).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiHeadConfig {
    /// IoU at or above which a proposal's box regression is trained.
    pub gamma: f64,
    pub theta_low: f64,
    pub theta_high: f64,
    pub num_samples: usize,
    pub lambda_mem: f64,
    pub beta: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
}

impl Default for RoiHeadConfig {
    fn default() -> Self {
        Self {
            gamma: 0.55,
            theta_low: 0.25,
            theta_high: 0.75,
            num_samples: 128,
            lambda_mem: 0.5,
            beta: 1.0 / 9.0,
            nms_threshold: 0.1,
            max_detections: 100,
        }
    }
}

impl RoiHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.theta_low && self.theta_low < self.theta_high && self.theta_high <= 1.0) {
            return Err(Error::invalid("confidence thresholds need 0 <= low < high <= 1"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("regression IoU threshold must lie in [0, 1]"));
        }
        if self.num_samples == 0 {
            return Err(Error::invalid("at least one proposal must be sampled"));
        }
        Ok(())
    }
}

/// Uniform sample of at most `n` proposal indices, ascending.
pub fn sample_proposals(count: usize, n: usize, seed: u64) -> Vec<usize> {
    if count <= n {
        return (0..count).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, count, n).into_vec();
    idx.sort_unstable();
    idx
}

/// Per-term sums; `memory` already carries `λ_mem` and all terms share the `1/N_s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiLoss {
    pub total: f64,
    pub reg: f64,
    pub conf: f64,
    pub memory: f64,
    pub num_samples: usize,
    pub num_regressed: usize,
}

/// `(Σ 𝟙[IoU ≥ γ]·reg + Σ conf + λ_mem·L_mem) / N_s` over the sampled proposals.
///
/// The memory loss is a per-scene quantity and is added once.
pub fn roi_loss(
    refinements: &[Refinement],
    proposals: &[Detection],
    gts: &[GroundTruth],
    mem_loss: f64,
    cfg: &RoiHeadConfig,
) -> Result<RoiLoss> {
    if refinements.is_empty() {
        return Err(Error::invalid("roi loss needs at least one sampled proposal"));
    }
    if refinements.len() != proposals.len() {
        return Err(Error::shape("roi_loss", "proposals", refinements.len(), proposals.len()));
    }
    if !mem_loss.is_finite() || refinements.iter().any(|r| !r.logit.is_finite() || r.delta.iter().any(|d| !d.is_finite())) {
        return Err(Error::NonFinite("roi loss inputs"));
    }
    let (mut reg, mut conf, mut regressed) = (0.0, 0.0, 0);
    for (r, p) in refinements.iter().zip(proposals) {
        let (iou, gt) = gts
            .iter()
            .enumerate()
            .map(|(i, g)| (iou3d(&p.bbox, &g.bbox), i))
            .fold((0.0, None), |best, (v, i)| if v > best.0 { (v, Some(i)) } else { best });
        if let (Some(g), true) = (gt, iou >= cfg.gamma) {
            let target = encode_residuals(&gts[g].bbox, &p.bbox)?;
            reg += r.delta.iter().zip(&target).map(|(d, t)| smooth_l1(d - t, cfg.beta)).sum::<f64>();
            regressed += 1;
        }
        conf += binary_cross_entropy(sigmoid(r.logit), confidence_target(iou, cfg.theta_low, cfg.theta_high));
    }
    let n = refinements.len() as f64;
    let (reg, conf, memory) = (reg / n, conf / n, cfg.lambda_mem * mem_loss / n);
    Ok(RoiLoss {
        total: reg + conf + memory,
        reg,
        conf,
        memory,
        num_samples: refinements.len(),
        num_regressed: regressed,
    })
}

/// Everything the second stage reads besides the scene and proposals.
#[derive(Clone, Copy, Debug)]
pub struct SecondStage<'a> {
    pub pool: &'a RoiPoolParams,
    pub pool_cfg: &'a RoiPoolConfig,
    pub memory: &'a MemoryModule,
    pub head: &'a RoiHeadParams,
    pub cfg: &'a RoiHeadConfig,
}

/// Pools, adds memory context, refines and re-scores each proposal, then
/// applies NMS. Residuals decode against the proposal with its own direction bin.
pub fn second_stage(scene: &SparseSceneFeature, proposals: &[Detection], stage: &SecondStage<'_>) -> Result<Vec<Detection>> {
    let refined = refine_proposals(scene, proposals, stage)?;
    Ok(nms(&refined, stage.cfg.nms_threshold, stage.cfg.max_detections, IouKind::Bev))
}

/// [`second_stage`] without the final NMS, one output per proposal.
pub fn refine_proposals(scene: &SparseSceneFeature, proposals: &[Detection], stage: &SecondStage<'_>) -> Result<Vec<Detection>> {
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let pooler = RoiPooler::new(scene, stage.pool, stage.pool_cfg)?;
    let width = stage.head.in_dim();
    let mut flat = Vec::with_capacity(proposals.len() * width);
    for p in proposals {
        let ctx = context_aware_roi(&pooler.pool(&p.bbox)?, stage.memory)?;
        if ctx.len() != width {
            return Err(Error::shape("second_stage", "context width", width, ctx.len()));
        }
        flat.extend_from_slice(ctx.data());
    }
    let refinements = refine_batch(&Tensor::new(vec![proposals.len(), width], flat)?, stage.head)?;
    proposals
        .iter()
        .zip(&refinements)
        .map(|(p, r)| {
            Ok(Detection {
                bbox: decode_residuals(&r.delta, &p.bbox, p.direction_bin)?,
                score: sigmoid(r.logit),
                class_id: p.class_id,
                direction_bin: p.direction_bin,
            })
        })
        .collect()
}
