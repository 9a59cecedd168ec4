//! Map accuracy evaluation against ground truth.
//!
//! Absolute error is the point-to-polyline distance of densely sampled map
//! points. Relative error removes the locally-rigid part of the error first:
//! within each 100 m window the mean displacement vector is subtracted before
//! measuring residuals, so a map that is merely shifted scores near zero.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::GroundTruthMap;
use crate::spline::BsplineTrajectory;

/// Window length over which the rigid offset is removed for relative error.
pub const RELATIVE_WINDOW_M: f64 = 100.0;
/// Minimum samples a window needs to contribute to the relative error.
pub const RELATIVE_WINDOW_MIN_SAMPLES: usize = 5;
/// A fused lane counts as matched when its mean error is below this.
pub const LANE_MATCH_TOLERANCE_M: f64 = 1.0;

/// Summary statistics over a set of error magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub std_dev: f64,
    pub max: f64,
    pub count: usize,
}

impl ErrorStats {
    fn from_magnitudes(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self {
                mean: 0.0,
                std_dev: 0.0,
                max: 0.0,
                count: 0,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std_dev: var.sqrt(),
            max: values.iter().cloned().fold(0.0, f64::max),
            count: values.len(),
        }
    }
}

/// Full evaluation output for one fused map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub absolute: ErrorStats,
    pub relative: ErrorStats,
    pub fused_lane_count: usize,
    pub ground_truth_lane_count: usize,
    /// Fused lanes whose mean error is below [`LANE_MATCH_TOLERANCE_M`].
    pub matched_lane_count: usize,
}

fn flatten(mut v: Vector3<f64>, planar: bool) -> Vector3<f64> {
    if planar {
        v.z = 0.0;
    }
    v
}

/// Distance vector from `p` to its closest point on segment `a`-`b`.
pub(crate) fn to_segment(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> Vector3<f64> {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 < 1e-18 {
        return p - a;
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    p - (a + t * ab)
}

/// Displacement from `p` to the nearest point on any ground-truth polyline.
fn nearest_displacement(p: &Vector3<f64>, gt: &GroundTruthMap, planar: bool) -> Vector3<f64> {
    let pf = flatten(*p, planar);
    let mut best = Vector3::new(f64::INFINITY, 0.0, 0.0);
    let mut best_norm = f64::INFINITY;
    for lane in &gt.lane_lines {
        for w in lane.points.windows(2) {
            let d = to_segment(&pf, &flatten(w[0], planar), &flatten(w[1], planar));
            let n = d.norm();
            if n < best_norm {
                best_norm = n;
                best = d;
            }
        }
    }
    best
}

/// Samples a trajectory at roughly one-meter spacing.
fn dense_samples(traj: &BsplineTrajectory) -> Vec<Vector3<f64>> {
    let segments = traj.segment_count().max(1);
    let per_segment = ((traj.chord().norm() / segments as f64).ceil() as usize).clamp(2, 64);
    traj.sample_means(per_segment)
}

/// Mean/spread of point-to-polyline distances of the map against truth.
pub fn absolute_error(
    map: &[BsplineTrajectory],
    gt: &GroundTruthMap,
    planar: bool,
) -> Result<ErrorStats> {
    if gt.lane_lines.iter().all(|l| l.points.len() < 2) {
        return Err(Error::EmptyGroundTruth);
    }
    let mut magnitudes = Vec::new();
    for traj in map {
        for p in dense_samples(traj) {
            magnitudes.push(nearest_displacement(&p, gt, planar).norm());
        }
    }
    Ok(ErrorStats::from_magnitudes(&magnitudes))
}

/// Residual error after removing the mean displacement per 100 m window.
pub fn relative_error(
    map: &[BsplineTrajectory],
    gt: &GroundTruthMap,
    planar: bool,
) -> Result<ErrorStats> {
    if gt.lane_lines.iter().all(|l| l.points.len() < 2) {
        return Err(Error::EmptyGroundTruth);
    }
    let mut magnitudes = Vec::new();
    for traj in map {
        let samples = dense_samples(traj);
        // Arc position of each sample along the fused line.
        let mut arc = 0.0;
        let mut windows: Vec<Vec<Vector3<f64>>> = Vec::new();
        let mut prev: Option<Vector3<f64>> = None;
        for p in &samples {
            if let Some(q) = prev {
                arc += (p - q).norm();
            }
            prev = Some(*p);
            let w = (arc / RELATIVE_WINDOW_M) as usize;
            if windows.len() <= w {
                windows.resize(w + 1, Vec::new());
            }
            windows[w].push(nearest_displacement(p, gt, planar));
        }
        for window in windows {
            if window.len() < RELATIVE_WINDOW_MIN_SAMPLES {
                continue;
            }
            let mean: Vector3<f64> =
                window.iter().sum::<Vector3<f64>>() / window.len() as f64;
            for d in &window {
                magnitudes.push((d - mean).norm());
            }
        }
    }
    Ok(ErrorStats::from_magnitudes(&magnitudes))
}

/// Evaluates a fused map: error statistics plus lane counting.
pub fn evaluate(
    map: &[BsplineTrajectory],
    gt: &GroundTruthMap,
    planar: bool,
) -> Result<AccuracyReport> {
    let absolute = absolute_error(map, gt, planar)?;
    let relative = relative_error(map, gt, planar)?;
    let mut matched = 0;
    for traj in map {
        let samples = dense_samples(traj);
        let mean = samples
            .iter()
            .map(|p| nearest_displacement(p, gt, planar).norm())
            .sum::<f64>()
            / samples.len().max(1) as f64;
        if mean < LANE_MATCH_TOLERANCE_M {
            matched += 1;
        }
    }
    Ok(AccuracyReport {
        absolute,
        relative,
        fused_lane_count: map.len(),
        ground_truth_lane_count: gt.lane_lines.len(),
        matched_lane_count: matched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{GroundTruthLane, ScenarioTemplate};
    use crate::spline::GaussianControlPoint;
    use approx::assert_relative_eq;

    fn straight_gt(length: usize, y: f64) -> GroundTruthMap {
        GroundTruthMap {
            template: ScenarioTemplate::Straight,
            lane_lines: vec![GroundTruthLane {
                points: (0..=length)
                    .map(|i| Vector3::new(i as f64, y, 0.0))
                    .collect(),
                arc_start: 0.0,
            }],
            signs: Vec::new(),
        }
    }

    fn straight_map(n: usize, spacing: f64, offset: Vector3<f64>) -> Vec<BsplineTrajectory> {
        let cps = (0..n)
            .map(|i| {
                GaussianControlPoint::isotropic(
                    Vector3::new(i as f64 * spacing, 0.0, 0.0) + offset,
                    0.01,
                )
            })
            .collect();
        vec![BsplineTrajectory::new(0, cps).unwrap()]
    }

    #[test]
    fn exact_map_has_zero_error() {
        let gt = straight_gt(150, 0.0);
        let map = straight_map(11, 15.0, Vector3::zeros());
        let abs = absolute_error(&map, &gt, false).unwrap();
        assert_relative_eq!(abs.mean, 0.0, epsilon = 1e-9);
        assert_relative_eq!(abs.max, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_offset_gives_exact_absolute_mean() {
        let gt = straight_gt(150, 0.0);
        let map = straight_map(11, 15.0, Vector3::new(0.0, 0.4, 0.0));
        let abs = absolute_error(&map, &gt, false).unwrap();
        assert_relative_eq!(abs.mean, 0.4, epsilon = 1e-9);
        assert!(abs.std_dev < 1e-9);
    }

    #[test]
    fn constant_offset_has_zero_relative_error() {
        let gt = straight_gt(150, 0.0);
        let map = straight_map(11, 15.0, Vector3::new(0.3, 0.5, 0.0));
        let rel = relative_error(&map, &gt, false).unwrap();
        assert!(rel.count >= RELATIVE_WINDOW_MIN_SAMPLES);
        assert!(rel.mean < 1e-9, "relative mean {}", rel.mean);
    }

    #[test]
    fn planar_toggle_ignores_height() {
        let gt = straight_gt(150, 0.0);
        let map = straight_map(11, 15.0, Vector3::new(0.0, 0.0, 2.0));
        let full = absolute_error(&map, &gt, false).unwrap();
        let planar = absolute_error(&map, &gt, true).unwrap();
        assert_relative_eq!(full.mean, 2.0, epsilon = 1e-9);
        assert_relative_eq!(planar.mean, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn point_to_segment_clamps_to_endpoints() {
        let d = to_segment(
            &Vector3::new(-3.0, 4.0, 0.0),
            &Vector3::new(0.0, 0.0, 0.0),
            &Vector3::new(10.0, 0.0, 0.0),
        );
        assert_relative_eq!(d.norm(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        let gt = GroundTruthMap {
            template: ScenarioTemplate::Straight,
            lane_lines: Vec::new(),
            signs: Vec::new(),
        };
        let map = straight_map(5, 15.0, Vector3::zeros());
        assert!(matches!(
            absolute_error(&map, &gt, false),
            Err(Error::EmptyGroundTruth)
        ));
    }

    #[test]
    fn lane_matching_counts_only_close_lanes() {
        let gt = straight_gt(150, 0.0);
        let mut map = straight_map(11, 15.0, Vector3::zeros());
        map.extend(straight_map(11, 15.0, Vector3::new(0.0, 30.0, 0.0)));
        let report = evaluate(&map, &gt, false).unwrap();
        assert_eq!(report.fused_lane_count, 2);
        assert_eq!(report.matched_lane_count, 1);
    }

    #[test]
    fn wavy_map_has_nonzero_relative_error() {
        let gt = straight_gt(150, 0.0);
        let cps = (0..11)
            .map(|i| {
                GaussianControlPoint::isotropic(
                    Vector3::new(i as f64 * 15.0, if i % 2 == 0 { 0.3 } else { -0.3 }, 0.0),
                    0.01,
                )
            })
            .collect();
        let map = vec![BsplineTrajectory::new(0, cps).unwrap()];
        let rel = relative_error(&map, &gt, false).unwrap();
        assert!(rel.mean > 0.05);
    }
}
