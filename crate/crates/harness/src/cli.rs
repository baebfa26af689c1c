//! Command-line interface. Every command writes its report to the given
//! writer so tests can run it in-process.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use pillars_core::pipeline::Detector;
use pillars_core::s2cfm::{GradCheckDims, GradientFault};
use pillars_core::voxelizer::{voxelize, PointCloud};

use crate::bench::{bench_runtime, gradcheck, ParamsReport};
use crate::checks;
use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::planted::{planted_center, planted_detector};
use crate::records::{to_jsonl, to_kitti_labels, DetectionRecord};
use crate::synth::{synth_scene, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "pillars", version, about = "Two-stage pillar detector: checks, benchmarks and untrained-weight demos")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, clap::Args)]
pub struct Common {
    /// TOML run configuration; KITTI defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    None,
    Zero,
    Double,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Voxelize a KITTI `.bin` cloud and report occupancy.
    Voxelize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Optional JSON dump of voxel coordinates and point counts.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full pipeline with seeded untrained weights; one JSON record per detection.
    Forward {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the hand-set planted-object weights instead of random ones.
        #[arg(long)]
        planted: bool,
        /// Also write KITTI-style label lines next to `--out`.
        #[arg(long)]
        kitti_labels: bool,
    },
    /// Finite-difference check of the memory-loss gradients over 20 seeds.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Corrupt the analytic gradient to confirm the check catches it.
        #[arg(long, value_enum, default_value = "none")]
        fault: Fault,
    },
    /// Run every acceptance check against its brute-force oracle.
    Oracle {
        #[command(flatten)]
        common: Common,
    },
    /// Per-layer parameter table, module totals and the separable-vs-3D comparison.
    BenchParams {
        #[command(flatten)]
        common: Common,
    },
    /// Per-stage wall clock, median over repeated runs.
    BenchRuntime {
        #[command(flatten)]
        common: Common,
        /// KITTI `.bin`; a 20k-point synthetic scene when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
    /// Generate a synthetic scene as a KITTI `.bin` plus a ground-truth JSON file.
    Synth {
        #[command(flatten)]
        common: Common,
        /// JSON scene description; one planted box with clutter when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(HarnessError::MalformedBin(format!(
            "{}: {} bytes is not a multiple of 16",
            path.display(),
            bytes.len()
        )));
    }
    PointCloud::from_kitti_bytes(&bytes).map_err(|e| HarnessError::MalformedBin(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn io(e: std::io::Error) -> HarnessError {
    HarnessError::io("<output>", e)
}

/// Runs one command; `Err(CheckFailed)` maps to exit code 1, other errors to 2.
pub fn run(cli: Cli, out: &mut impl Write) -> Result<()> {
    match cli.command {
        Command::Voxelize { common, input, out: dump } => {
            let cfg = load_config(&common)?.detector()?;
            let cloud = read_cloud(&input)?;
            let dims = cfg.scene.grid_dims()?;
            let scene = voxelize(&cloud, &cfg.scene)?;
            let cells = dims.iter().product::<usize>();
            let kept: usize = scene.counts.iter().sum();
            writeln!(out, "points {}", cloud.len()).map_err(io)?;
            writeln!(out, "voxels {}", scene.len()).map_err(io)?;
            writeln!(out, "points kept {kept}").map_err(io)?;
            writeln!(out, "occupancy {:.6}", scene.len() as f64 / cells as f64).map_err(io)?;
            writeln!(out, "grid dims {} {} {}", dims[0], dims[1], dims[2]).map_err(io)?;
            if let Some(p) = dump {
                let v = serde_json::json!({ "grid_dims": dims, "coords": scene.coords, "counts": scene.counts });
                write_file(&p, &v.to_string())?;
            }
        }
        Command::Forward {
            common,
            input,
            out: target,
            planted,
            kitti_labels,
        } => {
            let run = load_config(&common)?;
            let cfg = run.detector()?;
            let cloud = read_cloud(&input)?;
            let det = if planted { planted_detector(cfg.clone(), run.seed)? } else { Detector::seeded(cfg.clone(), run.seed)? };
            let result = det.forward(&cloud)?;
            let names: Vec<String> = cfg.anchors.classes.iter().map(|c| c.name.clone()).collect();
            let frame = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let records: Vec<DetectionRecord> = result.detections.iter().map(|d| DetectionRecord::from_detection(&frame, d, &names)).collect();
            let text = to_jsonl(&records);
            match &target {
                Some(p) => {
                    write_file(p, &text)?;
                    if kitti_labels {
                        write_file(&p.with_extension("txt"), &to_kitti_labels(&records))?;
                    }
                    writeln!(out, "{} detections written to {}", records.len(), p.display()).map_err(io)?;
                }
                None => out.write_all(text.as_bytes()).map_err(io)?,
            }
        }
        Command::Gradcheck { common, fault } => {
            let run = load_config(&common)?;
            let fault = match fault {
                Fault::None => GradientFault::None,
                Fault::Zero => GradientFault::Zero,
                Fault::Double => GradientFault::Double,
            };
            let report = gradcheck(run.seed, GradCheckDims::default(), fault)?;
            out.write_all(report.render().as_bytes()).map_err(io)?;
            if !report.passed() {
                return Err(HarnessError::CheckFailed(format!("worst relative error {:.3e}", report.worst())));
            }
        }
        Command::Oracle { common } => {
            let run = load_config(&common)?;
            let outcomes = checks::run_all(run.seed)?;
            for o in &outcomes {
                writeln!(out, "{}", o.line()).map_err(io)?;
            }
            let failed: Vec<usize> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
            if !failed.is_empty() {
                return Err(HarnessError::CheckFailed(format!("criteria {failed:?}")));
            }
        }
        Command::BenchParams { common } => {
            let cfg = load_config(&common)?.detector()?;
            out.write_all(ParamsReport::new(&cfg)?.render().as_bytes()).map_err(io)?;
        }
        Command::BenchRuntime { common, input, runs } => {
            let run = load_config(&common)?;
            let cfg = run.detector()?;
            let cloud = match input {
                Some(p) => read_cloud(&p)?,
                None => {
                    let c = planted_center(&cfg)?;
                    synth_scene(&SynthSpec::single_box(c, 4000, 16_000), &cfg.scene, run.seed)?.cloud
                }
            };
            let det = Detector::seeded(cfg, run.seed)?;
            out.write_all(bench_runtime(&det, &cloud, runs)?.render().as_bytes()).map_err(io)?;
        }
        Command::Synth { common, input, out: target } => {
            let run = load_config(&common)?;
            let cfg = run.detector()?;
            let spec = match input {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
                    serde_json::from_str(&text).map_err(|e| HarnessError::Input(format!("{}: {e}", p.display())))?
                }
                None => SynthSpec::single_box(planted_center(&cfg)?, 2000, 2000),
            };
            let scene = synth_scene(&spec, &cfg.scene, run.seed)?;
            scene.cloud.write_kitti_bin(&target)?;
            let gt: Vec<serde_json::Value> = scene
                .ground_truth
                .iter()
                .map(|g| serde_json::json!({ "class_id": g.class_id, "center": g.bbox.center, "size": g.bbox.size, "yaw": g.bbox.yaw }))
                .collect();
            let gt_path = target.with_extension("gt.json");
            write_file(&gt_path, &serde_json::to_string_pretty(&gt).expect("json values serialize"))?;
            writeln!(out, "{} points written to {}, ground truth in {}", scene.cloud.len(), target.display(), gt_path.display()).map_err(io)?;
        }
    }
    Ok(())
}
