//! Line-delimited detection records and a KITTI-label-style text export.

use pillars_core::geometry::Detection;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub frame: String,
    pub class: String,
    /// `(x, y, z, l, w, h, yaw)` in the lidar frame.
    #[serde(rename = "box")]
    pub bbox: [f64; 7],
    pub score: f64,
}

impl DetectionRecord {
    pub fn from_detection(frame: &str, d: &Detection, class_names: &[String]) -> Self {
        let b = &d.bbox;
        Self {
            frame: frame.to_string(),
            class: class_names.get(d.class_id).cloned().unwrap_or_else(|| format!("class{}", d.class_id)),
            bbox: [b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw],
            score: d.score,
        }
    }
}

/// One JSON object per line, each terminated by `\n`.
pub fn to_jsonl(records: &[DetectionRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

pub fn parse_jsonl(text: &str) -> Result<Vec<DetectionRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let r: DetectionRecord = serde_json::from_str(l).map_err(|e| HarnessError::Input(format!("record line {}: {e}", i + 1)))?;
            if !(0.0..=1.0).contains(&r.score) {
                return Err(HarnessError::Input(format!("record line {}: score {} outside [0, 1]", i + 1, r.score)));
            }
            Ok(r)
        })
        .collect()
}

/// KITTI label columns with the 2D box, truncation, occlusion and alpha left
/// at placeholder values. Without calibration the 3D box stays in the lidar
/// frame: `h w l x y z yaw score`.
pub fn to_kitti_labels(records: &[DetectionRecord]) -> String {
    records
        .iter()
        .map(|r| {
            let [x, y, z, l, w, h, yaw] = r.bbox;
            format!(
                "{} 0.00 0 -10.00 0.00 0.00 0.00 0.00 {h:.2} {w:.2} {l:.2} {x:.2} {y:.2} {z:.2} {yaw:.2} {:.4}\n",
                r.class, r.score
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use pillars_core::geometry::Box3D;

    fn sample() -> Vec<DetectionRecord> {
        let names: Vec<String> = ["Car", "Pedestrian"].map(String::from).to_vec();
        [(0.1f64, 0usize), (0.7, 1), (1.0 / 3.0, 5)]
            .iter()
            .map(|&(s, c)| {
                let d = Detection {
                    bbox: Box3D::new([1.0 / 7.0, -2.5, -1.0], [3.9, 1.6, 1.56], 0.3).unwrap(),
                    score: s,
                    class_id: c,
                    direction_bin: 0,
                };
                DetectionRecord::from_detection("000001", &d, &names)
            })
            .collect()
    }

    #[test]
    fn jsonl_round_trips_losslessly() {
        let recs = sample();
        let text = to_jsonl(&recs);
        assert_eq!(text.lines().count(), 3);
        assert_eq!(parse_jsonl(&text).unwrap(), recs);
        assert_eq!(recs[2].class, "class5");
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(parse_jsonl("{\"frame\":\"a\"}").is_err());
        let mut r = sample()[0].clone();
        r.score = 1.5;
        assert!(parse_jsonl(&serde_json::to_string(&r).unwrap()).is_err());
    }

    #[test]
    fn kitti_export_has_sixteen_columns() {
        let text = to_kitti_labels(&sample());
        for line in text.lines() {
            assert_eq!(line.split_whitespace().count(), 16);
        }
        assert!(text.starts_with("Car "));
    }
}
