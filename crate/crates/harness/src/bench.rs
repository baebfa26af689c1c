//! Parameter, runtime and gradient-check reports.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use pillars_core::backbone::{ParamEntry, SvfmCount};
use pillars_core::pipeline::{module_totals, param_entries, Detector, DetectorConfig, STAGES};
use pillars_core::s2cfm::{seeded_memory_grad_check, GradCheckDims, GradientFault};
use pillars_core::voxelizer::PointCloud;

use crate::error::Result;

/// Published total for the full model.
pub const REFERENCE_TOTAL: usize = 8_100_000;
/// Sanity band around [`REFERENCE_TOTAL`].
pub const TOTAL_BAND: (usize, usize) = (6_000_000, 11_000_000);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamsReport {
    pub entries: Vec<ParamEntry>,
    pub svfms: Vec<SvfmCount>,
    pub modules: Vec<(&'static str, usize)>,
    pub total: usize,
}

impl ParamsReport {
    pub fn new(cfg: &DetectorConfig) -> Result<Self> {
        let (entries, svfms) = param_entries(cfg)?;
        let modules = module_totals(&entries);
        let total = entries.iter().map(|e| e.count).sum();
        Ok(Self {
            entries,
            svfms,
            modules,
            total,
        })
    }

    pub fn separable_total(&self) -> usize {
        self.svfms.iter().map(|s| s.separable).sum()
    }

    pub fn hypothetical_3d_total(&self) -> usize {
        self.svfms.iter().map(|s| s.hypothetical_3d).sum()
    }

    pub fn in_band(&self) -> bool {
        (TOTAL_BAND.0..=TOTAL_BAND.1).contains(&self.total)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<10} {:<44} {:>12}", "module", "layer", "params").unwrap();
        for e in &self.entries {
            writeln!(s, "{:<10} {:<44} {:>12}", e.module, e.layer, e.count).unwrap();
        }
        writeln!(s, "\nper-module totals (share of the {REFERENCE_TOTAL} reference):").unwrap();
        for (m, n) in &self.modules {
            writeln!(s, "  {m:<10} {n:>12}  {:>6.1}%", 100.0 * *n as f64 / REFERENCE_TOTAL as f64).unwrap();
        }
        writeln!(s, "  {:<10} {:>12}", "total", self.total).unwrap();
        let delta = self.total as i64 - REFERENCE_TOTAL as i64;
        writeln!(
            s,
            "reference total {REFERENCE_TOTAL}: delta {delta:+} ({:+.1}%), band [{}, {}] {}",
            100.0 * delta as f64 / REFERENCE_TOTAL as f64,
            TOTAL_BAND.0,
            TOTAL_BAND.1,
            if self.in_band() { "inside" } else { "OUTSIDE" }
        )
        .unwrap();
        writeln!(s, "\nseparable modules vs one k^3 convolution with the same channels:").unwrap();
        for v in &self.svfms {
            writeln!(s, "  {:<28} {:>10} vs {:>10}  ratio {:.3}", v.name, v.separable, v.hypothetical_3d, v.ratio()).unwrap();
        }
        let (sep, full) = (self.separable_total(), self.hypothetical_3d_total());
        writeln!(
            s,
            "  {:<28} {sep:>10} vs {full:>10}  ratio {:.3} (reduction {:.1}%)",
            "all",
            sep as f64 / full as f64,
            100.0 * (1.0 - sep as f64 / full as f64)
        )
        .unwrap();
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuntimeReport {
    pub runs: usize,
    pub points: usize,
    /// Median per stage, in [`STAGES`] order.
    pub stages: Vec<(&'static str, Duration)>,
    /// Median end-to-end wall clock measured around the whole forward call.
    pub end_to_end: Duration,
    pub detections: usize,
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

pub fn bench_runtime(det: &Detector, cloud: &PointCloud, runs: usize) -> Result<RuntimeReport> {
    let runs = runs.max(5);
    let mut per_stage: Vec<Vec<Duration>> = vec![Vec::with_capacity(runs); STAGES.len()];
    let mut totals = Vec::with_capacity(runs);
    let mut detections = 0;
    for _ in 0..runs {
        let t = Instant::now();
        let out = det.forward(cloud)?;
        totals.push(t.elapsed());
        for (i, (_, d)) in out.timings.iter().enumerate() {
            per_stage[i].push(*d);
        }
        detections = out.detections.len();
    }
    Ok(RuntimeReport {
        runs,
        points: cloud.len(),
        stages: STAGES.iter().copied().zip(per_stage.into_iter().map(median)).collect(),
        end_to_end: median(totals),
        detections,
    })
}

impl RuntimeReport {
    pub fn stage_sum(&self) -> Duration {
        self.stages.iter().map(|(_, d)| *d).sum()
    }

    /// Relative gap between the summed stage medians and the end-to-end median.
    pub fn consistency_gap(&self) -> f64 {
        let e = self.end_to_end.as_secs_f64();
        (self.stage_sum().as_secs_f64() - e).abs() / e
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{} points, median of {} runs, {} detections", self.points, self.runs, self.detections).unwrap();
        writeln!(s, "{:<16} {:>12}", "stage", "ms").unwrap();
        for (name, d) in &self.stages {
            writeln!(s, "{name:<16} {:>12.2}", d.as_secs_f64() * 1e3).unwrap();
        }
        writeln!(s, "{:<16} {:>12.2}", "sum of stages", self.stage_sum().as_secs_f64() * 1e3).unwrap();
        writeln!(s, "{:<16} {:>12.2}  (gap {:.1}%)", "end-to-end", self.end_to_end.as_secs_f64() * 1e3, 100.0 * self.consistency_gap()).unwrap();
        writeln!(
            s,
            "note: these are CPU timings on this machine. Published stage times (for example 12.4 ms for the RoI head) were measured on a GPU and are not comparable."
        )
        .unwrap();
        s
    }
}

pub const GRADCHECK_SEEDS: u64 = 20;
pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub seed: u64,
    pub attempts: usize,
    pub keys: f64,
    pub values: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub dims: GradCheckDims,
    pub fault: GradientFault,
    pub rows: Vec<GradRow>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.rows.iter().map(|r| r.max).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.rows.len() == GRADCHECK_SEEDS as usize && self.worst() < GRADCHECK_TOLERANCE
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let d = &self.dims;
        writeln!(
            s,
            "memory gradient check: K={} V={} C={} N={}, feature std {}, h={GRADCHECK_STEP:e}, fault {:?}",
            d.keys, d.values, d.channels, d.features, d.feature_scale, self.fault
        )
        .unwrap();
        writeln!(s, "{:>5} {:>9} {:>12} {:>12} {:>12}", "seed", "attempts", "M_k", "M_v", "max").unwrap();
        for r in &self.rows {
            writeln!(s, "{:>5} {:>9} {:>12.3e} {:>12.3e} {:>12.3e}", r.seed, r.attempts, r.keys, r.values, r.max).unwrap();
        }
        writeln!(s, "worst {:.3e} vs tolerance {GRADCHECK_TOLERANCE:e}: {}", self.worst(), if self.passed() { "PASS" } else { "FAIL" }).unwrap();
        s
    }
}

pub fn gradcheck(base_seed: u64, dims: GradCheckDims, fault: GradientFault) -> Result<GradReport> {
    let rows = (0..GRADCHECK_SEEDS)
        .map(|i| {
            let seed = base_seed.wrapping_add(i);
            let r = seeded_memory_grad_check(seed, dims, GRADCHECK_STEP, fault, 50)?;
            Ok(GradRow {
                seed,
                attempts: r.attempts,
                keys: r.check.keys_rel_err,
                values: r.check.values_rel_err,
                max: r.check.max_rel_err,
            })
        })
        .collect::<Result<_>>()?;
    Ok(GradReport { dims, fault, rows })
}
