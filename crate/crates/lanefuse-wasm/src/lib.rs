//! Browser bindings for the lane fusion library.
//!
//! Every function takes and returns JSON strings so the page needs no
//! generated glue types: parse errors and domain errors come back as
//! `{"error": "..."}` objects instead of exceptions. The same functions
//! compile natively, which is how the unit tests exercise them.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::wasm_bindgen;

use lanefuse::fusion::{detect_overlap, fuse_pair, FusionParams};
use lanefuse::map_fusion::MapFusionParams;
use lanefuse::metrics;
use lanefuse::pipeline::{align_drives, fuse_drives};
use lanefuse::pose_graph::OptimizeConfig;
use lanefuse::sim::{simulate_fleet, ScenarioSpec, ScenarioTemplate};
use lanefuse::spline::{BsplineTrajectory, GaussianControlPoint};

/// A control point as the page sends it: mean plus an isotropic standard
/// deviation in meters.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ControlPointIn {
    mean: [f64; 3],
    #[serde(default = "default_sigma")]
    sigma: f64,
}

fn default_sigma() -> f64 {
    0.3
}

/// A curve vertex with its 1-sigma position uncertainty.
#[derive(Debug, Clone, Serialize)]
struct CurvePoint {
    position: [f64; 3],
    stddev: f64,
}

#[derive(Serialize)]
struct ErrorOut {
    error: String,
}

fn err_json(message: impl Into<String>) -> String {
    serde_json::to_string(&ErrorOut {
        error: message.into(),
    })
    .expect("error object serializes")
}

fn to_trajectory(cps: &[ControlPointIn]) -> Result<BsplineTrajectory, String> {
    if cps.len() < 3 {
        return Err(format!("need at least 3 control points, got {}", cps.len()));
    }
    let points = cps
        .iter()
        .map(|cp| {
            GaussianControlPoint::isotropic(Vector3::from_column_slice(&cp.mean), cp.sigma.max(0.0))
        })
        .collect();
    BsplineTrajectory::new(0, points).map_err(|e| e.to_string())
}

fn curve_points(traj: &BsplineTrajectory, samples_per_segment: usize) -> Vec<CurvePoint> {
    traj.sample_polyline(samples_per_segment)
        .into_iter()
        .map(|p| CurvePoint {
            position: [p.position_mean.x, p.position_mean.y, p.position_mean.z],
            stddev: (p.position_covariance.trace() / 3.0).max(0.0).sqrt(),
        })
        .collect()
}

/// Samples the B-spline through the given control points, returning curve
/// vertices with interpolated 1-sigma uncertainties.
///
/// Input: `[{"mean": [x, y, z], "sigma": s}, ...]` (three or more entries).
/// Output: `{"points": [{"position": [...], "stddev": s}, ...]}`.
#[wasm_bindgen]
pub fn interpolate_curve(control_points_json: &str, samples_per_segment: u32) -> String {
    #[derive(Serialize)]
    struct Out {
        points: Vec<CurvePoint>,
    }
    let cps: Vec<ControlPointIn> = match serde_json::from_str(control_points_json) {
        Ok(v) => v,
        Err(e) => return err_json(format!("invalid control points: {e}")),
    };
    let traj = match to_trajectory(&cps) {
        Ok(t) => t,
        Err(e) => return err_json(e),
    };
    let samples = samples_per_segment.clamp(2, 200) as usize;
    serde_json::to_string(&Out {
        points: curve_points(&traj, samples),
    })
    .unwrap_or_else(|e| err_json(e.to_string()))
}

/// Detects the overlap between two lane lines and fuses them.
///
/// Input: `{"target": [cp...], "source": [cp...], "gamma": 0.5}` where each
/// `cp` is as in [`interpolate_curve`] and `gamma` (the overlap distance gate
/// in meters) is optional. Output: the overlap classification, the coverage
/// fraction, and each output trajectory sampled as a curve with
/// uncertainties.
#[wasm_bindgen]
pub fn fuse_lane_pair(request_json: &str) -> String {
    #[derive(Deserialize)]
    struct Request {
        target: Vec<ControlPointIn>,
        source: Vec<ControlPointIn>,
        gamma: Option<f64>,
    }
    #[derive(Serialize)]
    struct Out {
        case: String,
        coverage: f64,
        source_reversed: bool,
        merged: Vec<Vec<CurvePoint>>,
    }

    let request: Request = match serde_json::from_str(request_json) {
        Ok(v) => v,
        Err(e) => return err_json(format!("invalid request: {e}")),
    };
    let target = match to_trajectory(&request.target) {
        Ok(t) => t,
        Err(e) => return err_json(format!("target: {e}")),
    };
    let source = match to_trajectory(&request.source) {
        Ok(t) => t,
        Err(e) => return err_json(format!("source: {e}")),
    };
    let mut params = FusionParams::default();
    if let Some(g) = request.gamma {
        if !(g > 0.0) {
            return err_json("gamma must be positive");
        }
        params.gamma = g;
    }

    let report = detect_overlap(
        &target,
        &source,
        params.gamma,
        params.tau_min,
        params.grid_per_segment,
    );
    let result = fuse_pair(&target, &source, &params);
    serde_json::to_string(&Out {
        case: format!("{:?}", report.case_label),
        coverage: report.coverage,
        source_reversed: report.source_reversed,
        merged: result.merged.iter().map(|t| curve_points(t, 8)).collect(),
    })
    .unwrap_or_else(|e| err_json(e.to_string()))
}

/// Runs a small end-to-end experiment: simulate a fleet, estimate per-drive
/// lane lines, align the drives, fuse, and evaluate against ground truth.
///
/// `template` is one of `straight`, `curve`, `split_merge`, `traffic_island`
/// or `composite`. Output: ground-truth polylines, the (aligned) per-drive
/// lane lines, the fused curves with uncertainties, and summary statistics.
#[wasm_bindgen]
pub fn run_mini_scenario(template: &str, drives: u32, seed: u64) -> String {
    #[derive(Serialize)]
    struct Out {
        ground_truth: Vec<Vec<[f64; 3]>>,
        drive_lanes: Vec<Vec<[f64; 3]>>,
        fused: Vec<Vec<CurvePoint>>,
        absolute_mean: f64,
        relative_mean: f64,
        fused_count: usize,
        ground_truth_count: usize,
        matched_count: usize,
    }

    let template: ScenarioTemplate = match template.parse() {
        Ok(t) => t,
        Err(e) => return err_json(format!("{e}")),
    };
    if !(1..=8).contains(&drives) {
        return err_json("drives must be between 1 and 8");
    }
    let spec = ScenarioSpec {
        template,
        drives,
        seed,
        length: 200.0,
        ..ScenarioSpec::default()
    };

    let (gt, fleet) = match simulate_fleet(&spec) {
        Ok(v) => v,
        Err(e) => return err_json(e.to_string()),
    };
    let aligned = match align_drives(&fleet, &OptimizeConfig::default()) {
        Ok(v) => v,
        Err(e) => return err_json(e.to_string()),
    };
    let fused = fuse_drives(&aligned, &MapFusionParams::default());
    let report = match metrics::evaluate(&fused.trajectories, &gt, false) {
        Ok(r) => r,
        Err(e) => return err_json(e.to_string()),
    };

    let as_triplets = |points: &[Vector3<f64>]| -> Vec<[f64; 3]> {
        points.iter().map(|p| [p.x, p.y, p.z]).collect()
    };
    serde_json::to_string(&Out {
        ground_truth: gt
            .lane_lines
            .iter()
            .map(|l| as_triplets(&l.points))
            .collect(),
        drive_lanes: aligned
            .iter()
            .flat_map(|d| d.lane_lines.iter())
            .map(|l| as_triplets(&l.spline.sample_means(4)))
            .collect(),
        fused: fused
            .trajectories
            .iter()
            .map(|t| curve_points(t, 8))
            .collect(),
        absolute_mean: report.absolute.mean,
        relative_mean: report.relative.mean,
        fused_count: report.fused_lane_count,
        ground_truth_count: report.ground_truth_lane_count,
        matched_count: report.matched_lane_count,
    })
    .unwrap_or_else(|e| err_json(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn interpolate_curve_samples_a_line() {
        let input = r#"[
            {"mean": [0, 0, 0], "sigma": 0.2},
            {"mean": [10, 0, 0], "sigma": 0.2},
            {"mean": [20, 0, 0], "sigma": 0.2}
        ]"#;
        let out = parse(&interpolate_curve(input, 10));
        let points = out["points"].as_array().unwrap();
        assert_eq!(points.len(), 10);
        assert!((points[0]["position"][0].as_f64().unwrap() - 5.0).abs() < 1e-9);
        assert!(points[0]["stddev"].as_f64().unwrap() > 0.0);
    }

    #[test]
    fn interpolate_curve_rejects_bad_input() {
        assert!(parse(&interpolate_curve("nonsense", 10))["error"].is_string());
        let two = r#"[{"mean": [0,0,0]}, {"mean": [1,0,0]}]"#;
        assert!(parse(&interpolate_curve(two, 10))["error"].is_string());
    }

    #[test]
    fn fuse_lane_pair_merges_duplicates() {
        let cp = |x: f64, y: f64| format!(r#"{{"mean": [{x}, {y}, 0], "sigma": 0.2}}"#);
        let line = |y: f64| {
            let cps: Vec<String> = (0..6).map(|i| cp(10.0 * i as f64, y)).collect();
            format!("[{}]", cps.join(","))
        };
        let request = format!(r#"{{"target": {}, "source": {}}}"#, line(0.0), line(0.1));
        let out = parse(&fuse_lane_pair(&request));
        assert_eq!(out["case"], "Complete");
        assert!(out["coverage"].as_f64().unwrap() > 0.9);
        assert_eq!(out["merged"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn fuse_lane_pair_reports_disjoint_lines() {
        let cp = |x: f64, y: f64| format!(r#"{{"mean": [{x}, {y}, 0]}}"#);
        let line = |y: f64| {
            let cps: Vec<String> = (0..6).map(|i| cp(10.0 * i as f64, y)).collect();
            format!("[{}]", cps.join(","))
        };
        let request = format!(r#"{{"target": {}, "source": {}}}"#, line(0.0), line(8.0));
        let out = parse(&fuse_lane_pair(&request));
        assert_eq!(out["case"], "None");
        assert_eq!(out["merged"].as_array().unwrap().len(), 2);
    }

    #[test]
    fn mini_scenario_straight_recovers_lanes() {
        let out = parse(&run_mini_scenario("straight", 2, 5));
        assert!(out.get("error").is_none(), "{out}");
        assert_eq!(out["ground_truth_count"], 3);
        assert_eq!(out["fused_count"], 3);
        assert!(out["absolute_mean"].as_f64().unwrap() < 3.0);
    }

    #[test]
    fn mini_scenario_rejects_bad_template() {
        let out = parse(&run_mini_scenario("figure-eight", 2, 1));
        assert!(out["error"].is_string());
    }
}
