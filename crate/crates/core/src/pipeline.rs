//! The full detector: voxelize, encode, backbone and neck, RPN proposals,
//! sparse scene context and second-stage refinement.

use std::time::{Duration, Instant};

use crate::backbone::{self, Backbone, BackboneConfig, Mode, ParamEntry, SvfmCount};
use crate::error::{Error, Result};
use crate::geometry::{nms, Detection, IouKind};
use crate::numerics::Tensor;
use crate::roi_head::{refine_proposals, RoiHeadConfig, RoiHeadParams, SecondStage, HEAD_WIDTH};
use crate::rpn::{decode_proposals, generate_anchors, rpn_heads, Anchor, AnchorConfig, BevGrid, ProposalConfig, RpnParams};
use crate::s2cfm::{build_scene_feature, RoiPoolConfig, S2cfmParams, CONTEXT_CHANNELS};
use crate::vfe::{encode, VfeParams, VFE_CHANNELS};
use crate::voxelizer::{scatter, voxelize, PointCloud, SceneConfig};

/// Stage names in report order.
pub const STAGES: [&str; 5] = ["Pseudo images", "Backbone", "RPN", "RoI head", "Post-processing"];

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub scene: SceneConfig,
    pub backbone: BackboneConfig,
    pub anchors: AnchorConfig,
    pub proposals: ProposalConfig,
    pub pool: RoiPoolConfig,
    pub roi: RoiHeadConfig,
    pub vfe_channels: usize,
    pub context_channels: usize,
    pub memory_keys: usize,
    pub memory_values: usize,
}

impl DetectorConfig {
    pub fn kitti() -> Self {
        Self {
            scene: SceneConfig::kitti(),
            backbone: BackboneConfig::default(),
            anchors: AnchorConfig::default(),
            proposals: ProposalConfig::default(),
            pool: RoiPoolConfig::default(),
            roi: RoiHeadConfig::default(),
            vfe_channels: VFE_CHANNELS,
            context_channels: CONTEXT_CHANNELS,
            memory_keys: 10,
            memory_values: 50,
        }
    }

    /// KITTI settings over the reduced desk range.
    pub fn desk() -> Self {
        Self {
            scene: SceneConfig::desk(),
            ..Self::kitti()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.grid_dims()?;
        self.backbone.validate()?;
        self.anchors.validate()?;
        self.roi.validate()?;
        if self.backbone.in_channels != self.vfe_channels {
            return Err(Error::invalid("backbone input width must equal the VFE width"));
        }
        if self.memory_keys == 0 || self.memory_values == 0 {
            return Err(Error::invalid("memory needs at least one key and one value item"));
        }
        Ok(())
    }

    /// `(D, Z, Y, X)` of the stacked pseudo images.
    pub fn input_shape(&self) -> Result<[usize; 4]> {
        let [x, y, z] = self.scene.grid_dims()?;
        Ok([self.vfe_channels, z, y, x])
    }

    /// Width of the concatenated scene feature before reduction.
    pub fn scene_feature_width(&self) -> usize {
        self.vfe_channels + self.backbone.blocks.iter().map(|b| b.out_channels).sum::<usize>()
    }

    /// Flattened context-aware RoI width `T³ · 2C`.
    pub fn roi_flat_width(&self) -> usize {
        self.pool.sub_regions() * 2 * self.context_channels
    }

    /// Metric placement of the RPN's BEV map.
    pub fn bev_grid(&self) -> Result<BevGrid> {
        let [_, h, w] = self.backbone.neck_shape(self.input_shape()?)?;
        let s = self.backbone.scale_strides()[0] as f64;
        let min = self.scene.min();
        Ok(BevGrid {
            shape: (h, w),
            origin: [min[0], min[1]],
            cell: [self.scene.voxel_size[0] * s, self.scene.voxel_size[1] * s],
        })
    }
}

/// Parameter counts from layer widths alone; matches an instantiated [`Detector`].
pub fn param_entries(cfg: &DetectorConfig) -> Result<(Vec<ParamEntry>, Vec<SvfmCount>)> {
    let entry = |module: &'static str, layer: &str, count: usize| ParamEntry {
        module,
        layer: layer.to_string(),
        count,
    };
    let d = cfg.vfe_channels;
    let mut out = vec![
        entry("vfe", "linear 10->D", 10 * d),
        entry("vfe", "batch norm", 2 * d),
    ];
    let (bb, svfm) = backbone::param_count(&cfg.backbone, cfg.input_shape()?)?;
    out.extend(bb);
    let c = cfg.backbone.neck_channels * cfg.backbone.blocks.len();
    let a = cfg.anchors.anchors_per_cell();
    let k = cfg.anchors.num_classes();
    for i in 0..2 {
        out.push(entry("rpn", &format!("shared 1x1 conv {}", i + 1), c * c));
        out.push(entry("rpn", &format!("shared batch norm {}", i + 1), 2 * c));
    }
    out.push(entry("rpn", "class head", (c + 1) * a * k));
    out.push(entry("rpn", "box head", (c + 1) * 7 * a));
    out.push(entry("rpn", "direction head", (c + 1) * 2 * a));
    let cc = cfg.context_channels;
    out.push(entry("s2cfm", "scene reducer", (cfg.scene_feature_width() + 1) * cc));
    for r in &cfg.pool.radii {
        out.push(entry("s2cfm", &format!("point-set layer 1 (radius {r})"), (3 + cc + 1) * 32));
        out.push(entry("s2cfm", &format!("point-set layer 2 (radius {r})"), (32 + 1) * 16));
    }
    out.push(entry("s2cfm", "sub-RoI projection", cfg.pool.radii.len() * 16 * cc));
    out.push(entry("s2cfm", "key memory", cfg.memory_keys * cc));
    out.push(entry("s2cfm", "value memory", cfg.memory_keys * cfg.memory_values * cc));
    let w = HEAD_WIDTH;
    out.push(entry("roi_head", "fc 1", (cfg.roi_flat_width() + 1) * w));
    out.push(entry("roi_head", "fc 2", (w + 1) * w));
    out.push(entry("roi_head", "box branch", (w + 1) * 7));
    out.push(entry("roi_head", "confidence branch", w + 1));
    Ok((out, svfm))
}

/// Per-module totals in first-appearance order.
pub fn module_totals(entries: &[ParamEntry]) -> Vec<(&'static str, usize)> {
    let mut out: Vec<(&'static str, usize)> = Vec::new();
    for e in entries {
        match out.iter_mut().find(|(m, _)| *m == e.module) {
            Some((_, n)) => *n += e.count,
            None => out.push((e.module, e.count)),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub vfe: VfeParams,
    pub backbone: Backbone,
    pub rpn: RpnParams,
    pub s2cfm: S2cfmParams,
    pub head: RoiHeadParams,
    pub anchors: Vec<Anchor>,
}

/// Tensor shapes seen during one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShapeTrace {
    pub input: Vec<usize>,
    pub scales: Vec<Vec<usize>>,
    pub neck: Vec<usize>,
    pub scene_feature: Vec<usize>,
    pub sub_roi: Vec<usize>,
    pub context: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub detections: Vec<Detection>,
    pub proposals: Vec<Detection>,
    pub voxels: usize,
    pub timings: Vec<(&'static str, Duration)>,
    pub shapes: ShapeTrace,
}

impl ForwardOutput {
    pub fn total_time(&self) -> Duration {
        self.timings.iter().map(|(_, d)| *d).sum()
    }
}

fn timed<T>(timings: &mut Vec<(&'static str, Duration)>, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage))?;
    timings.push((stage, t.elapsed()));
    Ok(out)
}

impl Detector {
    /// Untrained detector with every module seeded from `seed`.
    pub fn seeded(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let grid = config.scene.grid_dims()?;
        let neck_c = config.backbone.neck_channels * config.backbone.blocks.len();
        let s2cfm = S2cfmParams::seeded(
            config.scene_feature_width(),
            config.context_channels,
            config.memory_keys,
            config.memory_values,
            config.pool.radii.len(),
            seed.wrapping_add(4),
        );
        Ok(Self {
            vfe: VfeParams::seeded(config.vfe_channels, seed),
            backbone: Backbone::seeded(config.backbone.clone(), grid, seed.wrapping_add(1))?,
            rpn: RpnParams::seeded(neck_c, &config.anchors, seed.wrapping_add(2))?,
            head: RoiHeadParams::seeded(config.roi_flat_width(), HEAD_WIDTH, seed.wrapping_add(3)),
            anchors: generate_anchors(&config.bev_grid()?, &config.anchors)?,
            s2cfm,
            config,
        })
    }

    pub fn param_count(&self) -> usize {
        self.vfe.param_count() + self.backbone.param_count() + self.rpn.param_count() + self.s2cfm.param_count() + self.head.param_count()
    }

    pub fn module_param_counts(&self) -> Vec<(&'static str, usize)> {
        let neck: usize = self.backbone.neck.iter().map(|n| n.deconv.param_count() + n.bn.param_count()).sum();
        vec![
            ("vfe", self.vfe.param_count()),
            ("backbone", self.backbone.param_count() - neck),
            ("neck", neck),
            ("rpn", self.rpn.param_count()),
            ("s2cfm", self.s2cfm.param_count()),
            ("roi_head", self.head.param_count()),
        ]
    }

    pub fn forward(&self, cloud: &PointCloud) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let grid = cfg.scene.grid_dims()?;
        let mut timings = Vec::with_capacity(STAGES.len());
        let mut shapes = ShapeTrace::default();

        let (scene, encoded, stack) = timed(&mut timings, STAGES[0], || {
            let scene = voxelize(cloud, &cfg.scene)?;
            let encoded = encode(&scene, &self.vfe)?;
            let stack = scatter(&encoded, &scene.coords, grid)?.volume;
            Ok((scene, encoded, stack))
        })?;
        shapes.input = stack.shape().to_vec();

        let (multiscale, bev) = timed(&mut timings, STAGES[1], || {
            let ms = self.backbone.forward(&stack, Mode::Normal)?;
            let bev = self.backbone.neck(&ms, Mode::Normal)?;
            Ok((ms, bev))
        })?;
        drop(stack);
        shapes.scales = multiscale.scales.iter().map(|t| t.shape().to_vec()).collect();
        shapes.neck = bev.shape().to_vec();

        let proposals = timed(&mut timings, STAGES[2], || {
            let heads = rpn_heads(&bev, &self.rpn)?;
            decode_proposals(&heads, &self.anchors, &cfg.proposals)
        })?;
        drop(bev);

        let stage = SecondStage {
            pool: &self.s2cfm.pool,
            pool_cfg: &cfg.pool,
            memory: &self.s2cfm.memory,
            head: &self.head,
            cfg: &cfg.roi,
        };
        let refined = timed(&mut timings, STAGES[3], || {
            let sparse = build_scene_feature(&encoded, &scene.coords, &multiscale, &self.s2cfm.reducer, grid, &cfg.scene)?;
            shapes.scene_feature = sparse.features.shape().to_vec();
            shapes.sub_roi = vec![cfg.pool.sub_regions(), self.s2cfm.pool.out_channels()];
            shapes.context = vec![cfg.pool.sub_regions(), self.s2cfm.pool.out_channels() + self.s2cfm.memory.channels()];
            refine_proposals(&sparse, &proposals, &stage)
        })?;

        let detections = timed(&mut timings, STAGES[4], || {
            Ok(nms(&refined, cfg.roi.nms_threshold, cfg.roi.max_detections, IouKind::Bev))
        })?;

        Ok(ForwardOutput {
            detections,
            proposals,
            voxels: scene.len(),
            timings,
            shapes,
        })
    }
}

/// Zero-filled context-aware RoI tensor of the configured shape.
pub fn empty_context(cfg: &DetectorConfig) -> Tensor {
    Tensor::zeros(&[cfg.pool.sub_regions(), 2 * cfg.context_channels])
}
