//! The ten acceptance checks. Each returns a [`CheckOutcome`] instead of
//! panicking so the same code backs the `oracle` command and the test suite.

use std::time::Instant;

use pillars_core::backbone::{view_conv_strided, SliceAxis};
use pillars_core::geometry::{bev_iou, decode_residuals, direction_bin, encode_residuals, nms_indices, normalize_angle, Box3D, Detection, IouKind};
use pillars_core::numerics::{Conv2dParams, Tensor};
use pillars_core::pipeline::{Detector, DetectorConfig};
use pillars_core::roi_head::{roi_loss, Refinement, RoiHeadConfig};
use pillars_core::rpn::{assign_targets, generate_anchors, rpn_loss, AnchorConfig, AnchorLabel, BevGrid, GroundTruth, RpnLossWeights, RpnOutput};
use pillars_core::s2cfm::{
    context_aware_roi, key_address, manhattan_neighbors, memory_losses, value_read, GradCheckDims, GradientFault, MemoryModule, RoiFeature,
    RoiPoolConfig, RoiPoolParams, RoiPooler, SparseSceneFeature,
};
use pillars_core::voxelizer::SceneConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::{gradcheck, ParamsReport, GRADCHECK_TOLERANCE, REFERENCE_TOTAL, TOTAL_BAND};
use crate::error::Result;
use crate::oracle::{
    degenerate_kernel, exhaustive_manhattan, greedy_nms_oracle, key_address_loops, memory_loss_oracle, monte_carlo_bev_iou, naive_conv3d,
    value_read_loops,
};
use crate::planted::{matches, planted_setup};
use crate::records::{to_jsonl, DetectionRecord};
use crate::synth::{synth_scene, SynthSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    /// Set when only a soft (reporting) part failed; the exact parts passed.
    pub soft_failure: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(id: usize, name: &'static str, passed: bool, detail: String) -> Self {
        Self {
            id,
            name,
            passed,
            soft_failure: false,
            detail,
        }
    }

    pub fn line(&self) -> String {
        let status = match (self.passed, self.soft_failure) {
            (true, false) => "PASS",
            (true, true) => "SOFT-FAIL (exact checks pass; sanity band missed, see deltas)",
            (false, _) => "FAIL",
        };
        format!("criterion {:>2} [{}] {}: {}", self.id, self.name, status, self.detail)
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// View convolutions against a direct 3D convolution with degenerate kernels.
pub fn conv_oracle(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let axis = [SliceAxis::Z, SliceAxis::X, SliceAxis::Y][t % 3];
        let (c, o) = (rng.random_range(1..4), rng.random_range(1..4));
        let dims = [rng.random_range(3..9), rng.random_range(3..9), rng.random_range(3..9)];
        let k = [1, 3, 5][rng.random_range(0..3)];
        let plane = (rng.random_range(1..3), rng.random_range(1..3));
        let slice = rng.random_range(1..3);
        let x = random_tensor(&mut rng, &[c, dims[0], dims[1], dims[2]]);
        let w = random_tensor(&mut rng, &[o, c, k, k]);
        let got = view_conv_strided(&x, axis, &Conv2dParams::same(w.clone(), plane)?, slice)?;
        let (w3, stride, pad) = degenerate_kernel(axis, &w, plane, slice);
        let want = naive_conv3d(&x, &w3, stride, pad);
        if got.shape() != want.shape() {
            return Ok(CheckOutcome::new(1, "conv oracle", false, format!("trial {t}: shape {:?} vs {:?}", got.shape(), want.shape())));
        }
        worst = worst.max(got.max_abs_diff(&want));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(CheckOutcome::new(
        1,
        "conv oracle",
        worst < 1e-12 && secs < 60.0,
        format!("{trials} volumes, max abs diff {worst:.2e} (< 1e-12), {secs:.2} s (< 60 s)"),
    ))
}

pub fn grid_arithmetic() -> Result<CheckOutcome> {
    let dims = SceneConfig::kitti().grid_dims()?;
    let from_file = crate::config::RunConfig::default().detector()?.scene.grid_dims()?;
    Ok(CheckOutcome::new(
        2,
        "grid arithmetic",
        dims == [440, 500, 16] && from_file == dims,
        format!("KITTI grid {} {} {}", dims[0], dims[1], dims[2]),
    ))
}

fn orthonormal_rows(rng: &mut ChaCha8Rng, k: usize, c: usize) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < k {
        let mut v: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-3 {
            rows.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Tensor::new(vec![k, c], rows.concat()).expect("k·c entries")
}

pub fn memory_math(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut read_err, mut loss_err) = (0.0f64, 0.0f64);
    let mut ortho_ok = true;
    for _ in 0..trials {
        let (k, v, c, n) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(4..9), rng.random_range(1..31));
        let mem = MemoryModule::new(random_tensor(&mut rng, &[k, c]), random_tensor(&mut rng, &[k, v, c]))?;
        let f = random_tensor(&mut rng, &[n, c]);

        let w = key_address(&f, &mem.keys)?;
        let w_loops = key_address_loops(&f, &mem.keys);
        let g = value_read(&w, &mem)?;
        let g_loops = value_read_loops(&w_loops, &mem.values);
        for t in 0..n {
            for j in 0..k {
                read_err = read_err.max((w.at(&[t, j]) - w_loops[t][j]).abs());
            }
            for ch in 0..c {
                read_err = read_err.max((g.at(&[t, ch]) - g_loops[t][ch]).abs());
            }
        }
        let roi = RoiFeature {
            sub_features: f.clone(),
            sub_centers: vec![[0.0; 3]; n],
            outside: false,
            max_neighbors: vec![],
        };
        let ctx = context_aware_roi(&roi, &mem)?;
        for t in 0..n {
            for ch in 0..c {
                read_err = read_err.max((ctx.at(&[t, ch]) - f.at(&[t, ch])).abs());
                read_err = read_err.max((ctx.at(&[t, c + ch]) - g_loops[t][ch]).abs());
            }
        }

        let got = memory_losses(&f, &mem)?;
        let want = memory_loss_oracle(&f, &mem.keys, &mem.values);
        for (a, b) in [(got.key, want.key), (got.ortho, want.ortho), (got.value, want.value), (got.total, want.total)] {
            loss_err = loss_err.max((a - b).abs());
        }

        let ortho_keys = MemoryModule::new(orthonormal_rows(&mut rng, k, c), mem.values.clone())?;
        let zero = memory_losses(&f, &ortho_keys)?.ortho;
        ortho_ok &= zero < 1e-12 && got.ortho > 0.0;
    }
    Ok(CheckOutcome::new(
        3,
        "memory math",
        read_err < 1e-12 && loss_err < 1e-10 && ortho_ok,
        format!(
            "{trials} instances: address/read max diff {read_err:.2e} (< 1e-12), losses vs oracle {loss_err:.2e} (< 1e-10), ortho zero/positive {}",
            if ortho_ok { "ok" } else { "violated" }
        ),
    ))
}

pub fn gradient_checks(seed: u64) -> Result<CheckOutcome> {
    let ok = gradcheck(seed, GradCheckDims::default(), GradientFault::None)?;
    let bad = gradcheck(seed, GradCheckDims::default(), GradientFault::Zero)?;
    let caught = bad.rows.iter().all(|r| r.max > 0.1);
    Ok(CheckOutcome::new(
        4,
        "gradient checks",
        ok.passed() && caught,
        format!(
            "{} seeds worst rel err {:.2e} (< {GRADCHECK_TOLERANCE:e}); corrupted gradient min rel err {:.2e} (> 0.1)",
            ok.rows.len(),
            ok.worst(),
            bad.rows.iter().map(|r| r.max).fold(f64::INFINITY, f64::min)
        ),
    ))
}

fn random_box(rng: &mut ChaCha8Rng, spread: f64) -> Box3D {
    Box3D::new(
        [rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(-1.0..1.0)],
        [rng.random_range(0.5..5.0), rng.random_range(0.5..3.0), rng.random_range(0.5..2.0)],
        rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
    .expect("positive size")
}

pub fn geometry(pairs: usize, samples: usize, nms_sets: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut iou_err = 0.0f64;
    for i in 0..pairs {
        let a = random_box(&mut rng, 1.5);
        let b = random_box(&mut rng, 1.5);
        iou_err = iou_err.max((bev_iou(&a, &b) - monte_carlo_bev_iou(&a, &b, samples, seed ^ i as u64)).abs());
    }
    let mut nms_same = true;
    for _ in 0..nms_sets {
        let n = rng.random_range(0..11);
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection {
                bbox: random_box(&mut rng, 3.0),
                score: (rng.random_range(0..6) as f64) / 5.0,
                class_id: 0,
                direction_bin: 0,
            })
            .collect();
        let thr = rng.random_range(0.05..0.7);
        nms_same &= nms_indices(&dets, thr, 10, IouKind::Bev) == greedy_nms_oracle(&dets, thr, 10, bev_iou);
    }
    let mut rt = 0.0f64;
    for _ in 0..1000 {
        let gt = random_box(&mut rng, 20.0);
        let anchor = random_box(&mut rng, 20.0);
        let back = decode_residuals(&encode_residuals(&gt, &anchor)?, &anchor, direction_bin(gt.yaw))?;
        for a in 0..3 {
            rt = rt.max((back.center[a] - gt.center[a]).abs()).max((back.size[a] - gt.size[a]).abs());
        }
        rt = rt.max(normalize_angle(back.yaw - gt.yaw).abs());
    }
    Ok(CheckOutcome::new(
        5,
        "geometry",
        iou_err < 5e-3 && nms_same && rt < 1e-10,
        format!(
            "{pairs} pairs IoU vs {samples}-sample Monte Carlo max diff {iou_err:.2e} (< 5e-3); NMS identical on {nms_sets} sets: {nms_same}; roundtrip max err {rt:.2e} (< 1e-10)"
        ),
    ))
}

pub fn roi_pooling(scenes: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene_cfg = SceneConfig::desk();
    let dims = [24, 24, 10];
    let cfg = RoiPoolConfig::default();
    let (mut queries, mut identical, mut largest) = (0usize, true, 0usize);
    for _ in 0..scenes {
        let n = rng.random_range(0..3000);
        let mut coords: Vec<[usize; 3]> = (0..n).map(|_| [rng.random_range(0..24), rng.random_range(0..24), rng.random_range(0..10)]).collect();
        coords.sort();
        coords.dedup();
        let c = 4;
        let feats = random_tensor(&mut rng, &[coords.len(), c]);
        let scene = SparseSceneFeature::new(coords.clone(), feats, dims, scene_cfg.clone())?;
        for _ in 0..10 {
            let cell = [rng.random_range(-3..27), rng.random_range(-3..27), rng.random_range(-3..13)];
            for &r in &cfg.radii {
                let got = manhattan_neighbors(&scene, cell, r, cfg.max_neighbors);
                identical &= got == exhaustive_manhattan(&coords, cell, r, cfg.max_neighbors);
                largest = largest.max(got.len());
                queries += 1;
            }
        }
        let params = RoiPoolParams::seeded(c, [32, 16], cfg.radii.len(), c, seed);
        let pooler = RoiPooler::new(&scene, &params, &cfg)?;
        let b = Box3D::new(
            [rng.random_range(0.5..3.3), rng.random_range(-9.7..-6.5), rng.random_range(-2.5..-1.0)],
            [rng.random_range(0.5..4.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)],
            rng.random_range(-3.0..3.0),
        )?;
        let roi = pooler.pool(&b)?;
        largest = largest.max(roi.max_neighbors.iter().copied().max().unwrap_or(0));
    }
    Ok(CheckOutcome::new(
        6,
        "roi pooling",
        identical && largest <= cfg.max_neighbors,
        format!(
            "{scenes} scenes, {queries} ball queries identical to exhaustive search: {identical}; largest neighbor set {largest} (<= {})",
            cfg.max_neighbors
        ),
    ))
}

/// KITTI shapes in closed form plus a real forward pass on the desk range.
pub fn shape_contract(seed: u64) -> Result<CheckOutcome> {
    let kitti = DetectorConfig::kitti();
    let input = kitti.input_shape()?;
    let scales = kitti.backbone.output_shapes(input)?;
    let neck = kitti.backbone.neck_shape(input)?;
    let sub = [kitti.pool.sub_regions(), kitti.context_channels];
    let ctx = 2 * kitti.context_channels;
    let mut ok = scales == [[64, 8, 250, 220], [128, 4, 125, 110], [256, 2, 63, 55]] && neck == [576, 250, 220] && sub == [216, 160] && ctx == 320;

    let desk = DetectorConfig::desk();
    let det = Detector::seeded(desk.clone(), seed)?;
    let scene = synth_scene(&SynthSpec::single_box([10.0, 0.0], 1000, 1000), &desk.scene, seed)?;
    let out = det.forward(&scene.cloud)?;
    let d_in = desk.input_shape()?;
    let want_scales: Vec<Vec<usize>> = desk.backbone.output_shapes(d_in)?.iter().map(|s| s.to_vec()).collect();
    ok &= out.shapes.scales == want_scales
        && out.shapes.neck == desk.backbone.neck_shape(d_in)?.to_vec()
        && out.shapes.sub_roi == vec![216, 160]
        && out.shapes.context == vec![216, 320];
    Ok(CheckOutcome::new(
        7,
        "shape contract",
        ok,
        format!(
            "KITTI scales {:?}, neck {:?}, sub-RoI {:?}, context width {ctx}; desk run scales {:?} neck {:?} sub-RoI {:?} context {:?}",
            scales, neck, sub, out.shapes.scales, out.shapes.neck, out.shapes.sub_roi, out.shapes.context
        ),
    ))
}

pub fn parameter_accounting(seed: u64) -> Result<CheckOutcome> {
    let cfg = DetectorConfig::kitti();
    let report = ParamsReport::new(&cfg)?;
    let det = Detector::seeded(cfg, seed)?;
    let exact_modules = det.module_param_counts() == report.modules && det.param_count() == report.total;
    let svfm_exact = det
        .backbone
        .blocks
        .iter()
        .flatten()
        .zip(&report.svfms)
        .all(|(m, line)| m.conv_param_count() == line.separable)
        && det.backbone.blocks.iter().flatten().count() == report.svfms.len();
    let sum_exact = report.entries.iter().map(|e| e.count).sum::<usize>() == report.total;
    let deltas: Vec<String> = report.modules.iter().map(|(m, n)| format!("{m} {:.2}M", *n as f64 / 1e6)).collect();
    let mut outcome = CheckOutcome::new(
        8,
        "parameter accounting",
        exact_modules && svfm_exact && sum_exact,
        format!(
            "per-layer/module counts exact: {}; total {} ({:+.1}% vs {REFERENCE_TOTAL}), band [{}, {}]; modules: {}",
            exact_modules && svfm_exact && sum_exact,
            report.total,
            100.0 * (report.total as f64 / REFERENCE_TOTAL as f64 - 1.0),
            TOTAL_BAND.0,
            TOTAL_BAND.1,
            deltas.join(", ")
        ),
    );
    outcome.soft_failure = !report.in_band();
    Ok(outcome)
}

/// Seeded forward is byte-identical twice, planted box recovered, ≤ 100
/// detections, and a 20k-point scene runs under a minute.
pub fn end_to_end(seed: u64) -> Result<CheckOutcome> {
    let cfg = DetectorConfig::desk();
    let names: Vec<String> = cfg.anchors.classes.iter().map(|c| c.name.clone()).collect();
    let spec = SynthSpec::single_box([10.0, 2.0], 4000, 16_000);
    let scene = synth_scene(&spec, &cfg.scene, seed)?;
    let det = Detector::seeded(cfg.clone(), seed)?;
    let start = Instant::now();
    let first = det.forward(&scene.cloud)?;
    let secs = start.elapsed().as_secs_f64();
    let second = Detector::seeded(cfg.clone(), seed)?.forward(&scene.cloud)?;
    let lines = |o: &pillars_core::pipeline::ForwardOutput| {
        to_jsonl(&o.detections.iter().map(|d| DetectionRecord::from_detection("synthetic", d, &names)).collect::<Vec<_>>())
    };
    let identical = lines(&first) == lines(&second);

    let planted = planted_setup(cfg, 3000, 3000, seed)?;
    let out = planted.detector.forward(&planted.scene.cloud)?;
    let hits = matches(&out.detections, &planted.planted, 0.5);
    let capped = first.detections.len() <= 100 && out.detections.len() <= 100;
    Ok(CheckOutcome::new(
        9,
        "end-to-end",
        identical && hits == 1 && capped && secs < 60.0,
        format!(
            "byte-identical: {identical}; planted box matched by {hits} detection(s) with IoU > 0.5 (of {}); detections {} and {} (<= 100); {} points in {secs:.2} s (< 60 s)",
            out.detections.len(),
            first.detections.len(),
            out.detections.len(),
            scene.cloud.len()
        ),
    ))
}

pub fn loss_properties() -> Result<CheckOutcome> {
    let cfg = AnchorConfig::default();
    let grid = BevGrid {
        shape: (6, 6),
        origin: [0.0, -6.0],
        cell: [2.0, 2.0],
    };
    let anchors = generate_anchors(&grid, &cfg)?;
    let gts = [
        GroundTruth {
            bbox: Box3D::new([4.3, -1.8, -1.0], [4.0, 1.7, 1.5], 0.2)?,
            class_id: 0,
        },
        GroundTruth {
            bbox: Box3D::new([8.9, 2.2, -0.6], [0.8, 0.6, 1.7], 1.4)?,
            class_id: 1,
        },
    ];
    let targets = assign_targets(&anchors, &gts, &cfg);
    let k = cfg.num_classes();
    let mut out = RpnOutput {
        cls: vec![-40.0; anchors.len() * k],
        reg: vec![[0.0; 7]; anchors.len()],
        dir: vec![[0.0; 2]; anchors.len()],
        num_classes: k,
    };
    for (i, t) in targets.iter().enumerate() {
        if let (AnchorLabel::Positive, Some(g)) = (t.label, t.gt) {
            out.reg[i] = encode_residuals(&gts[g].bbox, &anchors[i].bbox)?;
            out.cls[i * k + gts[g].class_id] = 40.0;
            out.dir[i][direction_bin(gts[g].bbox.yaw) as usize] = 40.0;
        }
    }
    let w = RpnLossWeights::default();
    let rpn_perfect = rpn_loss(&out, &anchors, &targets, &gts, &w)?;

    let mut noisy = out.clone();
    noisy.reg.iter_mut().flatten().for_each(|r| *r += 0.3);
    noisy.dir.iter_mut().for_each(|d| d[0] += 1.0);
    let base = rpn_loss(&noisy, &anchors, &targets, &gts, &w)?;
    let doubled = rpn_loss(&noisy, &anchors, &targets, &gts, &RpnLossWeights { reg: 2.0 * w.reg, ..w })?;
    // Raw sums are weight-free, so the weighted box term doubles exactly.
    let np = base.num_positive.max(1) as f64;
    let rpn_linear = (doubled.reg, doubled.dir, doubled.cls) == (base.reg, base.dir, base.cls)
        && (doubled.total - base.total - w.reg * base.reg / np).abs() <= 1e-12 * doubled.total;

    let roi_cfg = RoiHeadConfig::default();
    let target = gts[0].bbox;
    let far = Box3D::new([30.0, 30.0, -1.0], [3.9, 1.6, 1.56], 0.0)?;
    let shifted = Box3D::new([5.6, -1.8, -1.0], [4.0, 1.7, 1.5], 0.2)?;
    let proposals = [target, far, shifted].map(|b| Detection {
        bbox: b,
        score: 0.5,
        class_id: 0,
        direction_bin: direction_bin(b.yaw),
    });
    let perfect: Vec<Refinement> = vec![
        Refinement { delta: [0.0; 7], logit: 40.0 },
        Refinement { delta: [0.0; 7], logit: -40.0 },
        Refinement { delta: [0.0; 7], logit: 0.0 },
    ];
    let roi_perfect = roi_loss(&perfect[..2], &proposals[..2], &gts, 0.0, &roi_cfg)?;
    let mem = 0.8;
    let base_roi = roi_loss(&perfect, &proposals, &gts, mem, &roi_cfg)?;
    let mut gated = perfect.clone();
    gated[1].delta = [3.0, -2.0, 1.0, 0.5, 0.4, -0.7, 2.0];
    let shifted_iou = pillars_core::geometry::iou3d(&shifted, &target);
    if shifted_iou < roi_cfg.gamma {
        gated[2].delta = [-1.0, 0.25, 0.5, 0.1, 0.2, 0.3, -0.4];
    }
    let gate_inert = roi_loss(&gated, &proposals, &gts, mem, &roi_cfg)?.total == base_roi.total;
    let roi2 = roi_loss(&perfect, &proposals, &gts, mem, &RoiHeadConfig { lambda_mem: 2.0 * roi_cfg.lambda_mem, ..roi_cfg })?;
    let roi_linear = roi2.memory == 2.0 * base_roi.memory && roi2.reg == base_roi.reg && roi2.conf == base_roi.conf;

    let ok = rpn_perfect.total < 1e-5 && roi_perfect.total < 1e-5 && gate_inert && rpn_linear && roi_linear;
    Ok(CheckOutcome::new(
        10,
        "loss properties",
        ok,
        format!(
            "RPN perfect {:.2e} ({} positives), RoI perfect {:.2e} (< 1e-5); gate inert: {gate_inert}; lambda linearity RPN {rpn_linear}, RoI {roi_linear}",
            rpn_perfect.total, rpn_perfect.num_positive, roi_perfect.total
        ),
    ))
}

/// Every criterion at full size.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        conv_oracle(100, seed)?,
        grid_arithmetic()?,
        memory_math(100, seed)?,
        gradient_checks(seed)?,
        geometry(100, 1_000_000, 500, seed)?,
        roi_pooling(200, seed)?,
        shape_contract(seed)?,
        parameter_accounting(seed)?,
        end_to_end(seed)?,
        loss_properties()?,
    ])
}
