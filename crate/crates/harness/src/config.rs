//! TOML run configuration. Every section is optional and defaults to the
//! KITTI settings; unknown keys are rejected.

use std::path::Path;

use pillars_core::backbone::{BackboneConfig, BlockConfig, SvfmVariant};
use pillars_core::geometry::IouKind;
use pillars_core::pipeline::DetectorConfig;
use pillars_core::roi_head::RoiHeadConfig;
use pillars_core::rpn::{AnchorClass, AnchorConfig, ProposalConfig, RpnLossWeights};
use pillars_core::s2cfm::RoiPoolConfig;
use pillars_core::voxelizer::SceneConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneSection,
    pub backbone: BackboneSection,
    pub anchors: AnchorSection,
    pub memory: MemorySection,
    pub pool: PoolSection,
    pub loss: LossSection,
    pub nms: NmsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub range_x: [f64; 2],
    pub range_y: [f64; 2],
    pub range_z: [f64; 2],
    pub voxel_size: [f64; 3],
    pub max_points_per_voxel: usize,
    pub max_voxels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Sequential,
    Parallel,
    SeqParallel,
    ParSeq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub vfe_channels: usize,
    pub kernel: usize,
    pub variant: Variant,
    pub neck_channels: usize,
    pub blocks: Vec<BlockSection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSection {
    pub num_svfm: usize,
    pub out_channels: usize,
    pub first_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorSection {
    /// Anchor yaws in radians.
    pub yaws: Vec<f64>,
    pub classes: Vec<AnchorClassSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorClassSection {
    pub name: String,
    pub size: [f64; 3],
    pub z_center: f64,
    pub matched_threshold: f64,
    pub unmatched_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    pub keys: usize,
    pub values: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    pub grid: usize,
    pub radii: Vec<usize>,
    pub max_neighbors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub rpn_reg: f64,
    pub rpn_dir: f64,
    pub rpn_cls: f64,
    pub rpn_beta: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub roi_gamma: f64,
    pub theta_low: f64,
    pub theta_high: f64,
    pub num_samples: usize,
    pub lambda_mem: f64,
    pub roi_beta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Iou {
    Bev,
    ThreeD,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsSection {
    pub k_pre: usize,
    pub proposal_threshold: f64,
    pub k_post: usize,
    pub proposal_iou: Iou,
    pub final_threshold: f64,
    pub max_detections: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_detector(&DetectorConfig::kitti(), &RpnLossWeights::default(), 0)
    }
}

macro_rules! default_from_kitti {
    ($($t:ty => $field:ident),*) => {
        $(impl Default for $t {
            fn default() -> Self {
                RunConfig::default().$field
            }
        })*
    };
}

default_from_kitti!(
    SceneSection => scene,
    BackboneSection => backbone,
    AnchorSection => anchors,
    MemorySection => memory,
    PoolSection => pool,
    LossSection => loss,
    NmsSection => nms
);

impl RunConfig {
    pub fn kitti() -> Self {
        Self::default()
    }

    pub fn desk() -> Self {
        Self::from_detector(&DetectorConfig::desk(), &RpnLossWeights::default(), 0)
    }

    pub fn from_detector(d: &DetectorConfig, w: &RpnLossWeights, seed: u64) -> Self {
        let s = &d.scene;
        let b = &d.backbone;
        Self {
            seed,
            scene: SceneSection {
                range_x: [s.range_x.0, s.range_x.1],
                range_y: [s.range_y.0, s.range_y.1],
                range_z: [s.range_z.0, s.range_z.1],
                voxel_size: s.voxel_size,
                max_points_per_voxel: s.max_points_per_voxel,
                max_voxels: s.max_voxels,
            },
            backbone: BackboneSection {
                vfe_channels: d.vfe_channels,
                kernel: b.kernel,
                variant: match b.variant {
                    SvfmVariant::Sequential => Variant::Sequential,
                    SvfmVariant::Parallel => Variant::Parallel,
                    SvfmVariant::SeqParallel => Variant::SeqParallel,
                    SvfmVariant::ParSeq => Variant::ParSeq,
                },
                neck_channels: b.neck_channels,
                blocks: b
                    .blocks
                    .iter()
                    .map(|b| BlockSection {
                        num_svfm: b.num_svfm,
                        out_channels: b.out_channels,
                        first_stride: b.first_stride,
                    })
                    .collect(),
            },
            anchors: AnchorSection {
                yaws: d.anchors.yaws.clone(),
                classes: d
                    .anchors
                    .classes
                    .iter()
                    .map(|c| AnchorClassSection {
                        name: c.name.clone(),
                        size: c.size,
                        z_center: c.z_center,
                        matched_threshold: c.matched_threshold,
                        unmatched_threshold: c.unmatched_threshold,
                    })
                    .collect(),
            },
            memory: MemorySection {
                keys: d.memory_keys,
                values: d.memory_values,
                channels: d.context_channels,
            },
            pool: PoolSection {
                grid: d.pool.grid,
                radii: d.pool.radii.clone(),
                max_neighbors: d.pool.max_neighbors,
            },
            loss: LossSection {
                rpn_reg: w.reg,
                rpn_dir: w.dir,
                rpn_cls: w.cls,
                rpn_beta: w.beta,
                focal_alpha: w.focal_alpha,
                focal_gamma: w.focal_gamma,
                roi_gamma: d.roi.gamma,
                theta_low: d.roi.theta_low,
                theta_high: d.roi.theta_high,
                num_samples: d.roi.num_samples,
                lambda_mem: d.roi.lambda_mem,
                roi_beta: d.roi.beta,
            },
            nms: NmsSection {
                k_pre: d.proposals.k_pre,
                proposal_threshold: d.proposals.nms_threshold,
                k_post: d.proposals.k_post,
                proposal_iou: match d.proposals.iou {
                    IouKind::Bev => Iou::Bev,
                    IouKind::ThreeD => Iou::ThreeD,
                },
                final_threshold: d.roi.nms_threshold,
                max_detections: d.roi.max_detections,
            },
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        cfg.detector().map_err(|e| HarnessError::Config {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable in TOML")
    }

    /// Validated detector configuration.
    pub fn detector(&self) -> pillars_core::Result<DetectorConfig> {
        let s = &self.scene;
        let b = &self.backbone;
        let l = &self.loss;
        let n = &self.nms;
        let cfg = DetectorConfig {
            scene: SceneConfig {
                range_x: (s.range_x[0], s.range_x[1]),
                range_y: (s.range_y[0], s.range_y[1]),
                range_z: (s.range_z[0], s.range_z[1]),
                voxel_size: s.voxel_size,
                max_points_per_voxel: s.max_points_per_voxel,
                max_voxels: s.max_voxels,
            },
            backbone: BackboneConfig {
                in_channels: b.vfe_channels,
                kernel: b.kernel,
                variant: match b.variant {
                    Variant::Sequential => SvfmVariant::Sequential,
                    Variant::Parallel => SvfmVariant::Parallel,
                    Variant::SeqParallel => SvfmVariant::SeqParallel,
                    Variant::ParSeq => SvfmVariant::ParSeq,
                },
                blocks: b
                    .blocks
                    .iter()
                    .map(|b| BlockConfig {
                        num_svfm: b.num_svfm,
                        out_channels: b.out_channels,
                        first_stride: b.first_stride,
                    })
                    .collect(),
                neck_channels: b.neck_channels,
            },
            anchors: AnchorConfig {
                classes: self
                    .anchors
                    .classes
                    .iter()
                    .map(|c| AnchorClass {
                        name: c.name.clone(),
                        size: c.size,
                        z_center: c.z_center,
                        matched_threshold: c.matched_threshold,
                        unmatched_threshold: c.unmatched_threshold,
                    })
                    .collect(),
                yaws: self.anchors.yaws.clone(),
            },
            proposals: ProposalConfig {
                k_pre: n.k_pre,
                nms_threshold: n.proposal_threshold,
                k_post: n.k_post,
                iou: match n.proposal_iou {
                    Iou::Bev => IouKind::Bev,
                    Iou::ThreeD => IouKind::ThreeD,
                },
            },
            pool: RoiPoolConfig {
                grid: self.pool.grid,
                radii: self.pool.radii.clone(),
                max_neighbors: self.pool.max_neighbors,
            },
            roi: RoiHeadConfig {
                gamma: l.roi_gamma,
                theta_low: l.theta_low,
                theta_high: l.theta_high,
                num_samples: l.num_samples,
                lambda_mem: l.lambda_mem,
                beta: l.roi_beta,
                nms_threshold: n.final_threshold,
                max_detections: n.max_detections,
            },
            vfe_channels: b.vfe_channels,
            context_channels: self.memory.channels,
            memory_keys: self.memory.keys,
            memory_values: self.memory.values,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss_weights(&self) -> RpnLossWeights {
        let l = &self.loss;
        RpnLossWeights {
            reg: l.rpn_reg,
            dir: l.rpn_dir,
            cls: l.rpn_cls,
            beta: l.rpn_beta,
            focal_alpha: l.focal_alpha,
            focal_gamma: l.focal_gamma,
        }
    }
}
