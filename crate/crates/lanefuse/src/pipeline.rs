//! End-to-end orchestration: drive maps in, fused lane-line map out.
//!
//! The stages mirror the CLI subcommands: build and optimize the multi-drive
//! pose graph, apply the per-submap corrections to each drive's map, inflate
//! control-point covariances by each drive's relative positioning error, and
//! greedily fuse lane lines across drives.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix6, Vector3};

use crate::error::Result;
use crate::map_fusion::{
    greedy_fuse, group_by_clusters, implicit_element, inflate_covariances, relative_error,
    ElementKind, LaneLineSet, MapFusionParams,
};
use crate::pose_graph::{
    optimize, register_lane_submaps, transform_drive_map, Factor, GraphState, LabeledPoint,
    OptimizeConfig, PointClass,
};
use crate::se3::PoseSe3;
use crate::sim::DriveMap;
use crate::spline::BsplineTrajectory;

/// Poses per rigid submap when applying graph corrections and when cutting
/// lane maps into registration chunks. Submaps must stay short enough that
/// one rigid correction (including its rotation) is accurate across the
/// whole chunk.
pub const SUBMAP_SIZE: usize = 10;
/// Submap centers farther apart than this are not attempted for registration.
pub const REGISTRATION_RANGE_M: f64 = 60.0;
/// Per-point noise assumed when turning the ICP Hessian into an information
/// matrix for the loop-closure factor.
pub const REGISTRATION_SIGMA_M: f64 = 0.15;
/// Along-lane sample spacing for registration point clouds.
const REGISTRATION_SAMPLE_SPACING_M: f64 = 3.0;

fn isotropic_info3(sigma: f64) -> Matrix3<f64> {
    Matrix3::identity() / (sigma * sigma).max(1e-12)
}

fn odometry_information(trans_sigma: f64, rot_sigma: f64) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    for i in 0..3 {
        m[(i, i)] = 1.0 / (trans_sigma * trans_sigma).max(1e-12);
        m[(i + 3, i + 3)] = 1.0 / (rot_sigma * rot_sigma).max(1e-12);
    }
    m
}

/// Initial graph state: every drive's pose chain plus one landmark per sign,
/// initialized at the mean of its drift-frame observations.
pub fn initial_state(drives: &[DriveMap]) -> GraphState {
    let mut state = GraphState::default();
    let mut sign_sums: BTreeMap<u32, (Vector3<f64>, usize)> = BTreeMap::new();
    for drive in drives {
        for (step, pose) in &drive.poses {
            state.poses.insert((drive.drive_id, *step), *pose);
        }
        for sign in &drive.signs {
            let entry = sign_sums.entry(sign.sign_id).or_insert((Vector3::zeros(), 0));
            entry.0 += sign.position;
            entry.1 += 1;
        }
    }
    for (id, (sum, n)) in sign_sums {
        state.sign_landmarks.insert(id, sum / n as f64);
    }
    state
}

/// Odometry, GNSS, and sign-observation factors for every drive.
pub fn measurement_factors(drives: &[DriveMap]) -> Vec<Factor> {
    let mut factors = Vec::new();
    for drive in drives {
        let odo_info = odometry_information(drive.odometry_sigma, drive.odometry_rot_sigma);
        for odo in &drive.odometry {
            factors.push(Factor::Odometry {
                drive: drive.drive_id,
                from_step: odo.from_step,
                to_step: odo.to_step,
                measurement: odo.relative,
                information: odo_info,
            });
        }
        let gnss_info = isotropic_info3(drive.gnss_sigma);
        for fix in &drive.gnss_fixes {
            factors.push(Factor::Gnss {
                drive: drive.drive_id,
                step: fix.step,
                position: fix.position,
                information: gnss_info,
            });
        }
        for sign in &drive.signs {
            let sigma = (sign.covariance.trace() / 3.0).max(1e-6).sqrt();
            factors.push(Factor::SignObservation {
                drive: drive.drive_id,
                step: sign.step,
                sign_id: sign.sign_id,
                measurement: sign.vehicle_frame,
                information: isotropic_info3(sigma),
            });
        }
    }
    factors
}

/// Steps of one drive grouped into submaps of [`SUBMAP_SIZE`], with the
/// center step of each.
fn submap_centers(drive: &DriveMap) -> Vec<(std::ops::Range<usize>, u32)> {
    let steps: Vec<u32> = drive.poses.iter().map(|(k, _)| *k).collect();
    let mut out = Vec::new();
    let mut start = 0;
    while start < steps.len() {
        let end = (start + SUBMAP_SIZE).min(steps.len());
        out.push((start..end, steps[start + (end - start) / 2]));
        start = end;
    }
    out
}

/// Registration point cloud of one submap: lane-line samples (attributed to
/// the submap via the creation step of the governing control point) plus
/// sign observations made within the submap's steps.
fn submap_points(drive: &DriveMap, step_range: &std::ops::Range<u32>) -> Vec<LabeledPoint> {
    let mut points = Vec::new();
    for lane in &drive.lane_lines {
        let cps = lane.spline.control_points();
        for segment in 1..=lane.spline.segment_count() {
            // The middle governing control point dates the segment.
            let step = lane.control_point_steps[segment.min(cps.len() - 2)];
            if step < step_range.start as i64 || step >= step_range.end as i64 {
                continue;
            }
            let chord = (cps[segment + 1].mean - cps[segment - 1].mean).norm() / 2.0;
            let samples = ((chord / REGISTRATION_SAMPLE_SPACING_M).ceil() as usize).clamp(2, 16);
            for j in 0..samples {
                let u = j as f64 / samples as f64;
                let p = lane
                    .spline
                    .interpolate(segment, u)
                    .expect("segment within range");
                points.push(LabeledPoint {
                    position: p.position_mean,
                    class: PointClass::LaneMarking,
                });
            }
        }
    }
    for sign in &drive.signs {
        if sign.step >= step_range.start && sign.step < step_range.end {
            points.push(LabeledPoint {
                position: sign.position,
                class: PointClass::Sign,
            });
        }
    }
    points
}

/// Attempts lane registration between every nearby submap pair of different
/// drives and returns the accepted loop-closure factors.
pub fn loop_closure_factors(drives: &[DriveMap]) -> Vec<Factor> {
    let mut factors = Vec::new();
    let pose_of = |drive: &DriveMap, step: u32| -> PoseSe3 {
        drive
            .poses
            .iter()
            .find(|(k, _)| *k == step)
            .map(|(_, p)| *p)
            .expect("center step exists")
    };
    for (ai, drive_a) in drives.iter().enumerate() {
        for drive_b in drives.iter().skip(ai + 1) {
            for (range_a, center_a) in submap_centers(drive_a) {
                let pa = pose_of(drive_a, center_a);
                for (range_b, center_b) in submap_centers(drive_b) {
                    let pb = pose_of(drive_b, center_b);
                    if (pa.translation - pb.translation).norm() > REGISTRATION_RANGE_M {
                        continue;
                    }
                    let steps_a = drive_a.poses[range_a.start].0..drive_a.poses[range_a.end - 1].0 + 1;
                    let steps_b = drive_b.poses[range_b.start].0..drive_b.poses[range_b.end - 1].0 + 1;
                    let cloud_a = submap_points(drive_a, &steps_a);
                    let cloud_b = submap_points(drive_b, &steps_b);
                    if cloud_a.is_empty() || cloud_b.is_empty() {
                        continue;
                    }
                    // Seed ICP with the centroid offset so a large common
                    // drift between the drives cannot snap lane lines onto
                    // the wrong neighbours.
                    let centroid = |c: &[LabeledPoint]| -> Vector3<f64> {
                        c.iter().map(|p| p.position).sum::<Vector3<f64>>() / c.len() as f64
                    };
                    let guess = PoseSe3::new(
                        nalgebra::UnitQuaternion::identity(),
                        centroid(&cloud_a) - centroid(&cloud_b),
                    );
                    let Ok((t, hessian)) = register_lane_submaps(&cloud_a, &cloud_b, &guess)
                    else {
                        continue;
                    };
                    // T aligns B's drifted frame onto A's near these submaps:
                    // the implied relative pose between the center poses is
                    // pa^-1 * T * pb.
                    let measurement = pa.inverse().compose(&t.compose(&pb));
                    let information = hessian / (REGISTRATION_SIGMA_M * REGISTRATION_SIGMA_M);
                    factors.push(Factor::LoopClosure {
                        drive_a: drive_a.drive_id,
                        step_a: center_a,
                        drive_b: drive_b.drive_id,
                        step_b: center_b,
                        measurement,
                        information,
                    });
                }
            }
        }
    }
    factors
}

/// Builds the full graph, optimizes it, and applies the per-submap pose
/// corrections to every drive's lane lines and signs.
pub fn align_drives(drives: &[DriveMap], config: &OptimizeConfig) -> Result<Vec<DriveMap>> {
    let state = initial_state(drives);
    let mut factors = measurement_factors(drives);
    factors.extend(loop_closure_factors(drives));
    let optimized = optimize(&state, &factors, config)?;
    Ok(drives
        .iter()
        .map(|d| transform_drive_map(d, &optimized, SUBMAP_SIZE))
        .collect())
}

/// Per-drive relative positioning error, estimated against implicit elements
/// (consensus lane lines per cluster, consensus sign positions per sign).
///
/// Returns the mean error magnitude per drive id; drives without any shared
/// element get no entry.
pub fn drive_relative_errors(drives: &[DriveMap]) -> BTreeMap<i64, f64> {
    let mut set = LaneLineSet::default();
    for drive in drives {
        for lane in &drive.lane_lines {
            set.push(lane.spline.clone(), drive.drive_id as i64);
        }
    }
    let mut sums: BTreeMap<i64, (f64, usize)> = BTreeMap::new();

    // Lane-line elements: one implicit TLS line per cluster.
    let clusters = group_by_clusters(&set, MapFusionParams::default().cluster_radius);
    for (element_id, cluster) in clusters.iter().enumerate() {
        let mut per_drive: BTreeMap<i64, Vec<Vector3<f64>>> = BTreeMap::new();
        for &idx in cluster {
            per_drive
                .entry(set.drive_ids[idx])
                .or_default()
                .extend(set.trajectories[idx].sample_means(5));
        }
        if per_drive.len() < 2 {
            continue;
        }
        let observations: Vec<Vec<Vector3<f64>>> = per_drive.values().cloned().collect();
        let Ok(element) = implicit_element(&observations, ElementKind::LaneLine) else {
            continue;
        };
        for (drive_id, obs) in &per_drive {
            let est = relative_error(obs, &element, element_id, *drive_id);
            let entry = sums.entry(*drive_id).or_insert((0.0, 0));
            entry.0 += est.magnitude;
            entry.1 += 1;
        }
    }

    // Sign elements: consensus position per sign id.
    let mut sign_obs: BTreeMap<u32, BTreeMap<i64, Vec<Vector3<f64>>>> = BTreeMap::new();
    for drive in drives {
        for sign in &drive.signs {
            sign_obs
                .entry(sign.sign_id)
                .or_default()
                .entry(drive.drive_id as i64)
                .or_default()
                .push(sign.position);
        }
    }
    for (sign_id, per_drive) in &sign_obs {
        if per_drive.len() < 2 {
            continue;
        }
        let observations: Vec<Vec<Vector3<f64>>> = per_drive.values().cloned().collect();
        let Ok(element) = implicit_element(&observations, ElementKind::TrafficSign) else {
            continue;
        };
        for (drive_id, obs) in per_drive {
            let est = relative_error(obs, &element, *sign_id as usize, *drive_id);
            let entry = sums.entry(*drive_id).or_insert((0.0, 0));
            entry.0 += est.magnitude;
            entry.1 += 1;
        }
    }

    sums.into_iter()
        .map(|(id, (sum, n))| (id, sum / n as f64))
        .collect()
}

/// Inflates each drive's control-point covariances by its relative
/// positioning error and fuses all lane lines across drives.
pub fn fuse_drives(drives: &[DriveMap], params: &MapFusionParams) -> LaneLineSet {
    let errors = drive_relative_errors(drives);
    let mut set = LaneLineSet::default();
    for drive in drives {
        let magnitude = errors.get(&(drive.drive_id as i64)).copied().unwrap_or(0.0);
        for lane in &drive.lane_lines {
            set.push(inflate_covariances(&lane.spline, magnitude), drive.drive_id as i64);
        }
    }
    greedy_fuse(&set, params)
}

/// Fused lane lines with the covariance inflation and graph alignment steps:
/// the full back half of the pipeline.
pub fn align_and_fuse(
    drives: &[DriveMap],
    config: &OptimizeConfig,
    params: &MapFusionParams,
) -> Result<Vec<BsplineTrajectory>> {
    let aligned = align_drives(drives, config)?;
    Ok(fuse_drives(&aligned, params).trajectories)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{build_scenario, estimate_lanes, simulate_drive, ScenarioSpec, ScenarioTemplate};

    fn fleet(spec: &ScenarioSpec) -> Vec<DriveMap> {
        let gt = build_scenario(spec).unwrap();
        (0..spec.drives)
            .map(|d| {
                let mut drive = simulate_drive(&gt, spec, d).unwrap();
                drive.lane_lines = estimate_lanes(&drive);
                drive
            })
            .collect()
    }

    fn small_spec() -> ScenarioSpec {
        ScenarioSpec {
            template: ScenarioTemplate::Straight,
            length: 200.0,
            drives: 2,
            seed: 11,
            ..ScenarioSpec::default()
        }
    }

    #[test]
    fn graph_has_all_measurement_factors() {
        let drives = fleet(&small_spec());
        let state = initial_state(&drives);
        assert_eq!(
            state.poses.len(),
            drives.iter().map(|d| d.poses.len()).sum::<usize>()
        );
        assert!(!state.sign_landmarks.is_empty());
        let factors = measurement_factors(&drives);
        let odo = drives.iter().map(|d| d.odometry.len()).sum::<usize>();
        let gnss = drives.iter().map(|d| d.gnss_fixes.len()).sum::<usize>();
        let signs = drives.iter().map(|d| d.signs.len()).sum::<usize>();
        assert_eq!(factors.len(), odo + gnss + signs);
    }

    #[test]
    fn loop_closures_found_between_overlapping_drives() {
        let drives = fleet(&small_spec());
        let closures = loop_closure_factors(&drives);
        assert!(
            !closures.is_empty(),
            "two drives over the same road must register"
        );
    }

    #[test]
    fn alignment_reduces_inter_drive_offset() {
        let spec = small_spec();
        let drives = fleet(&spec);
        let offset = |ds: &[DriveMap]| -> f64 {
            // Mean point-to-segment distance between the two drives' estimates
            // of the first lane line, restricted to their common along-road
            // extent so differing estimate lengths do not inflate the figure.
            let a = ds[0].lane_lines[0].spline.sample_means(8);
            let b = ds[1].lane_lines[0].spline.sample_means(8);
            let lo = a[0].x.max(b[0].x);
            let hi = a.last().unwrap().x.min(b.last().unwrap().x);
            let inner: Vec<_> = a.iter().filter(|p| p.x >= lo && p.x <= hi).collect();
            assert!(inner.len() > 20);
            inner
                .iter()
                .map(|p| {
                    b.windows(2)
                        .map(|seg| crate::metrics::to_segment(p, &seg[0], &seg[1]).norm())
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / inner.len() as f64
        };
        let before = offset(&drives);
        let closures = loop_closure_factors(&drives);
        assert!(!closures.is_empty());
        let aligned = align_drives(&drives, &OptimizeConfig::default()).unwrap();
        let after = offset(&aligned);
        assert!(
            after < before,
            "alignment must tighten drives: before {before:.3}, after {after:.3}"
        );
        assert!(after < 0.25, "aligned offset {after:.3} m too large");
    }

    #[test]
    fn fused_map_recovers_lane_count() {
        let spec = small_spec();
        let drives = fleet(&spec);
        let aligned = align_drives(&drives, &OptimizeConfig::default()).unwrap();
        let fused = fuse_drives(&aligned, &MapFusionParams::default());
        assert_eq!(
            fused.len(),
            3,
            "two straight drives must fuse into the three ground-truth lanes"
        );
    }

    #[test]
    fn relative_errors_reported_per_drive() {
        let drives = fleet(&small_spec());
        let errors = drive_relative_errors(&drives);
        assert_eq!(errors.len(), 2);
        for (_, e) in errors {
            assert!(e.is_finite() && e >= 0.0);
        }
    }
}
