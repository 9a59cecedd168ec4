//! Synthetic road scenarios and drive simulation.
//!
//! A scenario template produces a ground-truth map (lane-line polylines plus
//! traffic signs along a center path). Each simulated drive follows the
//! center path, accumulates odometry drift, records biased GNSS fixes and
//! sign observations, and runs the recursive lane estimator on noisy lane
//! detections to produce a per-drive lane-line map in its drifted frame.

use std::str::FromStr;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{LaneDetectionPoint, LaneEstimator, MeasurementModel};
use crate::se3::PoseSe3;
use crate::spline::{BsplineTrajectory, GaussianControlPoint};

/// Built-in scenario templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioTemplate {
    Straight,
    Curve,
    SplitMerge,
    TrafficIsland,
    Composite,
}

impl ScenarioTemplate {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Straight => "straight",
            Self::Curve => "curve",
            Self::SplitMerge => "split_merge",
            Self::TrafficIsland => "traffic_island",
            Self::Composite => "composite",
        }
    }
}

impl FromStr for ScenarioTemplate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight" => Ok(Self::Straight),
            "curve" => Ok(Self::Curve),
            "split_merge" => Ok(Self::SplitMerge),
            "traffic_island" => Ok(Self::TrafficIsland),
            "composite" => Ok(Self::Composite),
            other => Err(Error::InvalidScenario(format!(
                "unknown template '{other}' (expected straight, curve, split_merge, traffic_island or composite)"
            ))),
        }
    }
}

/// Full description of a simulation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub template: ScenarioTemplate,
    /// Arc length of the center path in meters.
    pub length: f64,
    /// Number of drives through the scenario.
    pub drives: u32,
    /// Base RNG seed; each drive derives its own stream from it.
    pub seed: u64,
    /// Per-axis GNSS standard deviation in meters.
    pub gnss_sigma: f64,
    /// Fraction of the GNSS sigma realized as a per-drive constant bias; the
    /// rest is white noise. Biased fixes make the absolute map error exceed
    /// the drive-to-drive relative error, as on real receivers.
    pub gnss_bias_fraction: f64,
    /// Per-step odometry translation noise (meters).
    pub odometry_sigma: f64,
    /// Per-step odometry rotation noise (radians).
    pub odometry_rot_sigma: f64,
    /// Per-axis lane-detection noise (meters).
    pub detection_sigma: f64,
    /// Expected number of detections per lane line per scan.
    pub poisson_rate: f64,
    /// Distance driven between scans (meters).
    pub step_length: f64,
    /// Forward sensor range for lane detections and signs (meters).
    pub visibility: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            template: ScenarioTemplate::Straight,
            length: 300.0,
            drives: 2,
            seed: 1,
            gnss_sigma: 1.0,
            gnss_bias_fraction: 0.7,
            odometry_sigma: 0.03,
            odometry_rot_sigma: 0.001,
            detection_sigma: 0.08,
            poisson_rate: 20.0,
            step_length: 4.0,
            visibility: 40.0,
        }
    }
}

/// A ground-truth lane line: a polyline sampled every meter of arc length,
/// plus the arc position (along the center path) of its first point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthLane {
    pub points: Vec<Vector3<f64>>,
    pub arc_start: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthSign {
    pub id: u32,
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthMap {
    pub template: ScenarioTemplate,
    pub lane_lines: Vec<GroundTruthLane>,
    pub signs: Vec<GroundTruthSign>,
}

/// Center path sampled at 1 m arc-length spacing with unit tangents.
struct CenterPath {
    positions: Vec<Vector3<f64>>,
    tangents: Vec<Vector3<f64>>,
}

impl CenterPath {
    /// Integrates a planar unicycle along piecewise-constant curvature.
    fn from_curvature(length: f64, curvature: impl Fn(f64) -> f64) -> Self {
        let n = length.ceil() as usize + 1;
        let mut positions = Vec::with_capacity(n);
        let mut tangents = Vec::with_capacity(n);
        let mut pos = Vector3::zeros();
        let mut heading: f64 = 0.0;
        for i in 0..n {
            let t = Vector3::new(heading.cos(), heading.sin(), 0.0);
            positions.push(pos);
            tangents.push(t);
            pos += t;
            heading += curvature(i as f64);
        }
        Self {
            positions,
            tangents,
        }
    }

    fn normal(&self, i: usize) -> Vector3<f64> {
        let t = self.tangents[i];
        Vector3::new(-t.y, t.x, 0.0)
    }

    fn len_m(&self) -> usize {
        self.positions.len()
    }

    /// Pose at arc position `s` (nearest sample), heading along the tangent.
    fn pose_at(&self, s: f64) -> PoseSe3 {
        let i = (s.round() as usize).min(self.len_m() - 1);
        let t = self.tangents[i];
        let yaw = t.y.atan2(t.x);
        PoseSe3::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, yaw)),
            self.positions[i],
        )
    }
}

const LANE_WIDTH: f64 = 3.5;
const SIGN_SPACING: f64 = 80.0;

/// Smoothstep ramp from 0 to 1 over `t` in [0, 1].
fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn offset_lane(
    path: &CenterPath,
    range: std::ops::Range<usize>,
    offset: impl Fn(f64) -> f64,
) -> GroundTruthLane {
    let points = range
        .clone()
        .map(|i| path.positions[i] + offset(i as f64) * path.normal(i))
        .collect();
    GroundTruthLane {
        points,
        arc_start: range.start as f64,
    }
}

fn signs_along(path: &CenterPath) -> Vec<GroundTruthSign> {
    let mut signs = Vec::new();
    let mut s = SIGN_SPACING / 2.0;
    let mut id = 0;
    while (s as usize) < path.len_m() {
        let i = s as usize;
        // Alternate road sides, mounted 2 m above ground.
        let side = if id % 2 == 0 { -1.0 } else { 1.0 };
        signs.push(GroundTruthSign {
            id,
            position: path.positions[i] + side * (LANE_WIDTH + 1.5) * path.normal(i)
                + Vector3::new(0.0, 0.0, 2.0),
        });
        id += 1;
        s += SIGN_SPACING;
    }
    signs
}

/// Builds the ground-truth map for a scenario.
///
/// All templates model a two-lane road: boundary lines at lateral offsets
/// -1.75 m and +1.75 m around the center path, plus an outer line at +5.25 m.
/// `split_merge` adds a branch lane peeling off the +1.75 m line and merging
/// back; `traffic_island` bulges the +1.75 m line inward around an island
/// while a temporary outer line passes on the other side.
pub fn build_scenario(spec: &ScenarioSpec) -> Result<GroundTruthMap> {
    if spec.length < 100.0 {
        return Err(Error::InvalidScenario(
            "scenario length must be at least 100 m".into(),
        ));
    }
    let l = spec.length;
    let path = match spec.template {
        ScenarioTemplate::Straight | ScenarioTemplate::SplitMerge | ScenarioTemplate::TrafficIsland => {
            CenterPath::from_curvature(l, |_| 0.0)
        }
        ScenarioTemplate::Curve => CenterPath::from_curvature(l, |_| 1.0 / 300.0),
        ScenarioTemplate::Composite => CenterPath::from_curvature(l, |s| {
            if s > l / 3.0 && s < 2.0 * l / 3.0 {
                1.0 / 250.0
            } else {
                0.0
            }
        }),
    };
    let n = path.len_m();
    let full = 0..n;

    let mut lane_lines = vec![
        offset_lane(&path, full.clone(), |_| -LANE_WIDTH / 2.0),
        offset_lane(&path, full.clone(), |_| LANE_WIDTH / 2.0),
        offset_lane(&path, full.clone(), |_| 1.5 * LANE_WIDTH),
    ];

    match spec.template {
        ScenarioTemplate::SplitMerge => {
            // A branch peels off the inner-right line, runs half a lane
            // width out (midway between the inner-right and outer lines, so
            // it stays distinct from both), and merges back. The 35 m ramps
            // keep the branch farther than the association gate from its
            // parent except for a short stretch at each end.
            let (s1, s2) = (0.30 * l, 0.30 * l + 35.0);
            let (s3, s4) = (0.70 * l - 35.0, 0.70 * l);
            lane_lines.push(offset_lane(
                &path,
                s1 as usize..(s4 as usize).min(n),
                move |s| {
                    let ramp = if s < s2 {
                        smoothstep((s - s1) / (s2 - s1))
                    } else if s > s3 {
                        1.0 - smoothstep((s - s3) / (s4 - s3))
                    } else {
                        1.0
                    };
                    LANE_WIDTH / 2.0 + 0.5 * LANE_WIDTH * ramp
                },
            ));
        }
        ScenarioTemplate::TrafficIsland => {
            // The inner-right line bulges 1 m inward around the island while
            // a temporary outer edge passes 1 m outside it.
            let (s1, s2) = (0.40 * l, 0.40 * l + 30.0);
            let (s3, s4) = (0.60 * l - 30.0, 0.60 * l);
            let bulge = move |s: f64| -> f64 {
                if s < s2 {
                    smoothstep((s - s1) / (s2 - s1))
                } else if s > s3 {
                    1.0 - smoothstep((s - s3) / (s4 - s3))
                } else {
                    1.0
                }
            };
            lane_lines[1] = offset_lane(&path, full.clone(), move |s| {
                if s >= s1 && s <= s4 {
                    LANE_WIDTH / 2.0 - 1.0 * bulge(s)
                } else {
                    LANE_WIDTH / 2.0
                }
            });
            lane_lines.push(offset_lane(
                &path,
                s1 as usize..(s4 as usize).min(n),
                move |s| LANE_WIDTH / 2.0 + 1.0 * bulge(s),
            ));
        }
        _ => {}
    }

    Ok(GroundTruthMap {
        template: spec.template,
        lane_lines,
        signs: signs_along(&path),
    })
}

/// One lane line estimated during a drive, with the time step at which each
/// control point was created (used to bind control points to pose submaps).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriveLaneLine {
    pub spline: BsplineTrajectory,
    pub control_point_steps: Vec<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignObservationRecord {
    pub sign_id: u32,
    pub step: u32,
    /// Sign position in the drive's (drifted) world frame.
    pub position: Vector3<f64>,
    /// The raw observation in the vehicle frame at `step`.
    pub vehicle_frame: Vector3<f64>,
    pub covariance: Matrix3<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GnssFix {
    pub step: u32,
    pub position: Vector3<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OdometryMeasurement {
    pub from_step: u32,
    pub to_step: u32,
    pub relative: PoseSe3,
}

/// One scan of raw lane detections, grouped by detected lane.
///
/// The grouping reflects per-scan instance segmentation; associating lanes
/// *across* drives remains the fusion engine's job.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanRecord {
    pub step: u32,
    pub per_lane: Vec<Vec<Vector3<f64>>>,
}

/// Everything one drive produces: drifted pose estimates, raw lane-detection
/// scans, estimated lane lines in the drifted frame, sign observations, and
/// the GNSS/odometry measurements needed to build the pose graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriveMap {
    pub drive_id: u32,
    /// Estimated (odometry-integrated) pose per step.
    pub poses: Vec<(u32, PoseSe3)>,
    /// Raw detections; input to [`estimate_lanes`].
    pub scans: Vec<ScanRecord>,
    /// Lane lines produced by [`estimate_lanes`]; empty until estimation ran.
    pub lane_lines: Vec<DriveLaneLine>,
    pub signs: Vec<SignObservationRecord>,
    pub gnss_fixes: Vec<GnssFix>,
    pub odometry: Vec<OdometryMeasurement>,
    pub gnss_sigma: f64,
    pub odometry_sigma: f64,
    pub odometry_rot_sigma: f64,
    pub detection_sigma: f64,
    pub poisson_rate: f64,
}

fn gauss3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    Vector3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng))
}

const SIGN_OBS_SIGMA: f64 = 0.3;
const DETECTION_SPREAD_SIGMA: f64 = 0.1;
const SEED_MIN_DETECTIONS: usize = 6;
const SEED_SIGMA: f64 = 0.6;

/// Simulates one drive through the scenario.
///
/// The drive's RNG stream depends only on `(spec.seed, drive_id)`, so fleets
/// are reproducible and drives are independent of each other.
pub fn simulate_drive(gt: &GroundTruthMap, spec: &ScenarioSpec, drive_id: u32) -> Result<DriveMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ drive_id as u64);
    let l = spec.length;
    let path = match spec.template {
        ScenarioTemplate::Straight | ScenarioTemplate::SplitMerge | ScenarioTemplate::TrafficIsland => {
            CenterPath::from_curvature(l, |_| 0.0)
        }
        ScenarioTemplate::Curve => CenterPath::from_curvature(l, |_| 1.0 / 300.0),
        ScenarioTemplate::Composite => CenterPath::from_curvature(l, |s| {
            if s > l / 3.0 && s < 2.0 * l / 3.0 {
                1.0 / 250.0
            } else {
                0.0
            }
        }),
    };

    let steps = (l / spec.step_length).floor() as u32 + 1;
    let true_poses: Vec<PoseSe3> = (0..steps)
        .map(|k| path.pose_at(k as f64 * spec.step_length))
        .collect();

    // Odometry with noise, integrated into drifted pose estimates. The first
    // estimated pose starts at its GNSS-like position so drives with
    // different biases do not share a perfect anchor.
    let bias = {
        let b = spec.gnss_bias_fraction * spec.gnss_sigma;
        let mut v = gauss3(&mut rng, b);
        v.z *= 0.2;
        v
    };
    let white_sigma = spec.gnss_sigma * (1.0 - spec.gnss_bias_fraction.powi(2)).max(0.0).sqrt();

    let mut odometry = Vec::new();
    let mut est_poses = vec![PoseSe3::new(
        true_poses[0].rotation,
        true_poses[0].translation + bias + gauss3(&mut rng, white_sigma),
    )];
    for k in 1..steps as usize {
        let true_rel = true_poses[k - 1].between(&true_poses[k]);
        let rot_noise = UnitQuaternion::from_scaled_axis(gauss3(&mut rng, spec.odometry_rot_sigma));
        let noisy = PoseSe3::new(
            true_rel.rotation * rot_noise,
            true_rel.translation + gauss3(&mut rng, spec.odometry_sigma),
        );
        odometry.push(OdometryMeasurement {
            from_step: (k - 1) as u32,
            to_step: k as u32,
            relative: noisy,
        });
        est_poses.push(est_poses[k - 1].compose(&noisy));
    }

    let gnss_fixes: Vec<GnssFix> = (0..steps)
        .map(|k| GnssFix {
            step: k,
            position: true_poses[k as usize].translation + bias + gauss3(&mut rng, white_sigma),
        })
        .collect();

    // Lane detections per scan, expressed in the drifted frame: a point seen
    // in the vehicle frame is re-anchored at the estimated pose.
    let poisson = Poisson::new(spec.poisson_rate.max(1e-6))
        .map_err(|_| Error::InvalidScenario("poisson_rate must be positive".into()))?;
    let mut scans = Vec::with_capacity(steps as usize);
    for k in 0..steps as usize {
        let s_vehicle = k as f64 * spec.step_length;
        let drift = est_poses[k].compose(&true_poses[k].inverse());
        let mut per_lane = Vec::with_capacity(gt.lane_lines.len());
        for lane in &gt.lane_lines {
            let lo = (s_vehicle - lane.arc_start).max(0.0);
            let hi = (s_vehicle + spec.visibility - lane.arc_start)
                .min((lane.points.len().max(1) - 1) as f64);
            let mut dets = Vec::new();
            if hi > lo {
                let count = poisson.sample(&mut rng) as usize;
                for _ in 0..count {
                    let a = rng.gen_range(lo..hi);
                    let i = a as usize;
                    let frac = a - i as f64;
                    let p_true = lane.points[i] * (1.0 - frac)
                        + lane.points[(i + 1).min(lane.points.len() - 1)] * frac;
                    let noisy = p_true + gauss3(&mut rng, spec.detection_sigma);
                    dets.push(drift.transform_point(&noisy));
                }
            }
            per_lane.push(dets);
        }
        scans.push(ScanRecord {
            step: k as u32,
            per_lane,
        });
    }

    // Sign observations within sensor range, forward of the vehicle.
    let sign_cov = Matrix3::identity() * SIGN_OBS_SIGMA * SIGN_OBS_SIGMA;
    let mut signs = Vec::new();
    for (k, (tp, ep)) in true_poses.iter().zip(est_poses.iter()).enumerate() {
        for sign in &gt.signs {
            let local = tp.inverse().transform_point(&sign.position);
            if local.x < 0.0 || local.norm() > spec.visibility {
                continue;
            }
            let observed = local + gauss3(&mut rng, SIGN_OBS_SIGMA);
            signs.push(SignObservationRecord {
                sign_id: sign.id,
                step: k as u32,
                position: ep.transform_point(&observed),
                vehicle_frame: observed,
                covariance: sign_cov,
            });
        }
    }

    Ok(DriveMap {
        drive_id,
        poses: (0..steps).map(|k| (k, est_poses[k as usize])).collect(),
        scans,
        lane_lines: Vec::new(),
        signs,
        gnss_fixes,
        odometry,
        gnss_sigma: spec.gnss_sigma,
        odometry_sigma: spec.odometry_sigma,
        odometry_rot_sigma: spec.odometry_rot_sigma,
        detection_sigma: spec.detection_sigma,
        poisson_rate: spec.poisson_rate,
    })
}

/// Runs the recursive lane estimator over a drive's scans, one estimator per
/// detected lane. Returns the estimated lane lines in the drive's frame.
pub fn estimate_lanes(drive: &DriveMap) -> Vec<DriveLaneLine> {
    let model = MeasurementModel {
        source_spread_covariance: Matrix3::identity()
            * DETECTION_SPREAD_SIGMA
            * DETECTION_SPREAD_SIGMA,
        poisson_rate: drive.poisson_rate,
    };
    let det_cov = Matrix3::identity() * drive.detection_sigma * drive.detection_sigma;
    let lane_count = drive.scans.iter().map(|s| s.per_lane.len()).max().unwrap_or(0);
    let mut estimators: Vec<Option<LaneEstimator>> = vec![None; lane_count];
    for scan in &drive.scans {
        for (lane_idx, positions) in scan.per_lane.iter().enumerate() {
            if positions.is_empty() {
                continue;
            }
            let dets: Vec<LaneDetectionPoint> = positions
                .iter()
                .map(|p| LaneDetectionPoint {
                    position: *p,
                    noise_covariance: det_cov,
                    time_step: scan.step as i64,
                })
                .collect();
            match &mut estimators[lane_idx] {
                Some(est) => est.step(&dets, scan.step as i64),
                slot @ None => {
                    if dets.len() >= SEED_MIN_DETECTIONS {
                        let seed = seed_trajectory(&dets, scan.step as i64);
                        let mut est = LaneEstimator::new(seed, model.clone(), scan.step as i64);
                        est.step(&dets, scan.step as i64);
                        *slot = Some(est);
                    }
                }
            }
        }
    }
    estimators
        .into_iter()
        .flatten()
        .map(|est| DriveLaneLine {
            control_point_steps: est.control_point_steps().to_vec(),
            spline: est.trajectory().clone(),
        })
        .collect()
}

/// Three seed control points from the first usable scan: detections are
/// ordered along their principal direction and averaged in thirds.
fn seed_trajectory(dets: &[LaneDetectionPoint], time_step: i64) -> BsplineTrajectory {
    let centroid = dets.iter().map(|d| d.position).sum::<Vector3<f64>>() / dets.len() as f64;
    let mut scatter = Matrix3::zeros();
    for d in dets {
        let c = d.position - centroid;
        scatter += c * c.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(scatter);
    let dir = eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned();

    let mut ordered: Vec<Vector3<f64>> = dets.iter().map(|d| d.position).collect();
    ordered.sort_by(|a, b| {
        let pa = (a - centroid).dot(&dir);
        let pb = (b - centroid).dot(&dir);
        pa.partial_cmp(&pb).expect("projections are finite")
    });
    let third = (ordered.len() / 3).max(1);
    let mean_of = |chunk: &[Vector3<f64>]| -> Vector3<f64> {
        chunk.iter().sum::<Vector3<f64>>() / chunk.len() as f64
    };
    let cps = vec![
        GaussianControlPoint::isotropic(mean_of(&ordered[..third]), SEED_SIGMA * SEED_SIGMA),
        GaussianControlPoint::isotropic(
            mean_of(&ordered[third..ordered.len() - third]),
            SEED_SIGMA * SEED_SIGMA,
        ),
        GaussianControlPoint::isotropic(
            mean_of(&ordered[ordered.len() - third..]),
            SEED_SIGMA * SEED_SIGMA,
        ),
    ];
    BsplineTrajectory::new(time_step, cps).expect("three control points")
}

/// Builds the ground truth, simulates every drive of the fleet, and runs
/// lane estimation on each drive.
pub fn simulate_fleet(spec: &ScenarioSpec) -> Result<(GroundTruthMap, Vec<DriveMap>)> {
    let gt = build_scenario(spec)?;
    let drives = (0..spec.drives)
        .map(|d| {
            let mut drive = simulate_drive(&gt, spec, d)?;
            drive.lane_lines = estimate_lanes(&drive);
            Ok(drive)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((gt, drives))
}
