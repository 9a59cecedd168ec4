//! Simplified per-lane recursive B-spline estimation from lane-marking
//! detections.
//!
//! A running estimator keeps one trajectory per lane line and, each scan,
//! gates detections to the lane, refreshes the latest three control points
//! with an information update, and extends the trajectory once the vehicle
//! outruns the current last segment. Multi-lane data association is out of
//! scope; detections must already be grouped per lane.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::fusion::{information_update, PseudoMeasurement};
use crate::spline::{BsplineTrajectory, GaussianControlPoint};

/// Mahalanobis gate (~99% for 3 DoF) for associating a detection to the lane.
pub const GATING_DISTANCE: f64 = 3.0;

/// Best-match `u` above this value counts toward appending a new control point.
const EXTENSION_U: f64 = 0.9;
/// Consecutive scans with best-match `u` beyond [`EXTENSION_U`] before extending.
const EXTENSION_SCANS: usize = 3;
/// Covariance inflation for an extrapolated control point.
const EXTENSION_COVARIANCE_FACTOR: f64 = 4.0;
/// Lateral gate for detections counted as lying ahead of the trajectory end.
const AHEAD_LATERAL_GATE: f64 = 1.5;
/// Forward gate for detections counted as lying ahead of the trajectory end.
const AHEAD_FORWARD_GATE: f64 = 30.0;
/// Minimum extrapolation length for an appended control point; shorter
/// extensions would create near-duplicate control points.
const MIN_EXTENSION_M: f64 = 1.0;
/// Maximum extrapolation length for an appended control point. Must let the
/// trajectory end keep pace with the vehicle: one extension at most every
/// [`EXTENSION_SCANS`] scans has to cover the distance driven in between.
const MAX_EXTENSION_M: f64 = 16.0;
/// Extrapolation uncertainty per meter of extension, added isotropically to
/// the appended control point's covariance.
const EXTENSION_DRIFT_RATE: f64 = 0.06;

/// A single lane-marking edge detection in the world frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LaneDetectionPoint {
    pub position: Vector3<f64>,
    pub noise_covariance: Matrix3<f64>,
    pub time_step: i64,
}

/// Per-lane measurement model: detection counts are Poisson with rate
/// `poisson_rate` and each source point is spread along the marking edge with
/// covariance `source_spread_covariance`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasurementModel {
    pub source_spread_covariance: Matrix3<f64>,
    pub poisson_rate: f64,
}

fn log_gaussian(x: &Vector3<f64>, mean: &Vector3<f64>, cov: &Matrix3<f64>) -> f64 {
    let chol = crate::spline::regularize_covariance(*cov)
        .cholesky()
        .expect("regularized covariance is PD");
    let diff = x - mean;
    let white = chol.l().solve_lower_triangular(&diff).expect("triangular solve");
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + log_det + white.norm_squared())
}

/// Best interpolated point on the latest segment (governed by the latest
/// three control points), by grid search over `u`.
fn best_latest_point(
    traj: &BsplineTrajectory,
    position: &Vector3<f64>,
    grid: usize,
) -> (f64, crate::spline::InterpolatedPoint) {
    let segment = traj.segment_count();
    let mut best_u = 0.0;
    let mut best = traj.interpolate(segment, 0.0).expect("valid segment");
    let mut best_d = (best.position_mean - position).norm();
    for t in 1..grid {
        let u = t as f64 / grid as f64;
        let p = traj.interpolate(segment, u).expect("valid segment");
        let d = (p.position_mean - position).norm();
        if d < best_d {
            best_d = d;
            best_u = u;
            best = p;
        }
    }
    (best_u, best)
}

/// Log-likelihood of one detection under the lane's measurement model, using
/// the closest interpolated point on the latest segment.
pub fn single_measurement_loglik(
    traj: &BsplineTrajectory,
    det: &LaneDetectionPoint,
    model: &MeasurementModel,
) -> f64 {
    let (_, point) = best_latest_point(traj, &det.position, 50);
    let total = det.noise_covariance + model.source_spread_covariance + point.position_covariance;
    log_gaussian(&det.position, &point.position_mean, &total)
}

/// Log of the Poisson point process set likelihood:
/// `-lambda + sum(ln lambda + single_measurement_loglik)`.
pub fn set_loglik(
    traj: &BsplineTrajectory,
    dets: &[LaneDetectionPoint],
    model: &MeasurementModel,
) -> f64 {
    // Summands are sorted before accumulation so the result is exactly
    // invariant under permutations of the detection set.
    let mut terms: Vec<f64> = dets
        .iter()
        .map(|det| model.poisson_rate.ln() + single_measurement_loglik(traj, det, model))
        .collect();
    terms.sort_by(f64::total_cmp);
    -model.poisson_rate + terms.iter().sum::<f64>()
}

/// One recursive update of the latest three control points with a scan of
/// detections. Detections are gated by Mahalanobis distance to the nearest
/// interpolated point on the latest segment; survivors update the latest
/// block in information form with `R = detection noise + source spread`.
///
/// Returns the updated trajectory; with no gated detections the input is
/// returned unchanged.
pub fn recursive_update(
    traj: &BsplineTrajectory,
    dets: &[LaneDetectionPoint],
    model: &MeasurementModel,
) -> BsplineTrajectory {
    recursive_update_inner(traj, dets, model).0
}

/// Whether any detection lies forward of the trajectory end along the end
/// direction, close enough laterally to plausibly continue the lane.
fn has_detections_ahead(traj: &BsplineTrajectory, dets: &[LaneDetectionPoint]) -> bool {
    let cps = traj.control_points();
    let n = cps.len();
    let end = traj
        .interpolate(traj.segment_count(), 1.0)
        .expect("last segment is valid")
        .position_mean;
    let dir = cps[n - 1].mean - cps[n - 2].mean;
    if dir.norm() < 1e-9 {
        return false;
    }
    let dir = dir.normalize();
    dets.iter().any(|det| {
        let diff = det.position - end;
        let forward = diff.dot(&dir);
        let lateral = (diff - forward * dir).norm();
        forward > 0.0 && forward < AHEAD_FORWARD_GATE && lateral < AHEAD_LATERAL_GATE
    })
}

fn recursive_update_inner(
    traj: &BsplineTrajectory,
    dets: &[LaneDetectionPoint],
    model: &MeasurementModel,
) -> (BsplineTrajectory, Option<f64>) {
    let mut assigned = Vec::new();
    let mut max_u: Option<f64> = None;
    for det in dets {
        let (u, point) = best_latest_point(traj, &det.position, 50);
        let total = det.noise_covariance + model.source_spread_covariance + point.position_covariance;
        let chol = crate::spline::regularize_covariance(total)
            .cholesky()
            .expect("regularized covariance is PD");
        let diff = det.position - point.position_mean;
        let maha = chol
            .l()
            .solve_lower_triangular(&diff)
            .expect("triangular solve")
            .norm();
        if maha <= GATING_DISTANCE {
            max_u = Some(max_u.map_or(u, |m: f64| m.max(u)));
            assigned.push((
                PseudoMeasurement {
                    position: det.position,
                    noise_covariance: det.noise_covariance + model.source_spread_covariance,
                    source_segment: traj.segment_count(),
                    source_u: u,
                },
                u,
            ));
        }
    }
    if assigned.is_empty() {
        return (traj.clone(), None);
    }

    let v = traj.len();
    let cps = traj.control_points();
    let prior: [GaussianControlPoint; 3] =
        [cps[v - 3].clone(), cps[v - 2].clone(), cps[v - 1].clone()];
    // Detections are independent real measurements, so no 1/M tempering.
    let updated = information_update(&prior, &assigned, 1);

    let mut out = traj.clone();
    let cps = out.control_points_mut();
    cps[v - 3] = updated[0].clone();
    cps[v - 2] = updated[1].clone();
    cps[v - 1] = updated[2].clone();
    (out, max_u)
}

/// A running single-lane estimator: wraps the recursive update with the
/// control-point extension policy.
#[derive(Debug, Clone)]
pub struct LaneEstimator {
    trajectory: BsplineTrajectory,
    model: MeasurementModel,
    /// Time step at which each control point was created.
    control_point_steps: Vec<i64>,
    consecutive_end_scans: usize,
}

impl LaneEstimator {
    /// Starts an estimator from an initial trajectory (e.g. three seed
    /// control points along the lane direction).
    pub fn new(trajectory: BsplineTrajectory, model: MeasurementModel, time_step: i64) -> Self {
        let n = trajectory.len();
        Self {
            trajectory,
            model,
            control_point_steps: vec![time_step; n],
            consecutive_end_scans: 0,
        }
    }

    pub fn trajectory(&self) -> &BsplineTrajectory {
        &self.trajectory
    }

    pub fn control_point_steps(&self) -> &[i64] {
        &self.control_point_steps
    }

    pub fn model(&self) -> &MeasurementModel {
        &self.model
    }

    /// Processes one scan of per-lane detections.
    pub fn step(&mut self, dets: &[LaneDetectionPoint], time_step: i64) {
        let (updated, max_u) = recursive_update_inner(&self.trajectory, dets, &self.model);
        self.trajectory = updated;
        // Evidence that the lane continues: detections lie forward of the
        // end point, or the best association sits at the end of the latest
        // segment. The association alone is not enough — without detections
        // ahead the lane would keep extrapolating past the end of the road.
        let ahead = has_detections_ahead(&self.trajectory, dets);
        match max_u {
            _ if ahead => self.consecutive_end_scans += 1,
            Some(u) if u > EXTENSION_U => {}
            Some(_) => self.consecutive_end_scans = 0,
            None => {}
        }
        if self.consecutive_end_scans >= EXTENSION_SCANS && self.extend(dets, time_step) {
            self.consecutive_end_scans = 0;
        }
    }

    /// Appends a control point extrapolated linearly from the last two means,
    /// with the last covariance inflated. The extrapolation length is capped
    /// so the interpolated end point (the midpoint of the last two control
    /// points) does not pass the furthest supporting detection; without any
    /// detection usefully beyond the last control point nothing is appended.
    fn extend(&mut self, dets: &[LaneDetectionPoint], time_step: i64) -> bool {
        let cps = self.trajectory.control_points();
        let n = cps.len();
        let dir = cps[n - 1].mean - cps[n - 2].mean;
        let spacing = dir.norm();
        if spacing < 1e-9 {
            return false;
        }
        let dir = dir / spacing;
        let support = dets
            .iter()
            .map(|det| (det.position - cps[n - 1].mean).dot(&dir))
            .fold(f64::NEG_INFINITY, f64::max);
        let length = MAX_EXTENSION_M.min(2.0 * support);
        if length < MIN_EXTENSION_M {
            return false;
        }
        let mean = cps[n - 1].mean + dir * length;
        // Linear extrapolation is wrong by roughly curvature × length², so
        // the appended point's uncertainty must grow with the extrapolated
        // distance or later detections get gated out on curves.
        let drift = EXTENSION_DRIFT_RATE * length;
        let cov = cps[n - 1].covariance() * EXTENSION_COVARIANCE_FACTOR
            + Matrix3::identity() * drift * drift;
        self.trajectory.push(GaussianControlPoint::new(mean, cov));
        self.control_point_steps.push(time_step);
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn straight(n: usize, step: f64, sigma: f64) -> BsplineTrajectory {
        let cps = (0..n)
            .map(|i| {
                GaussianControlPoint::isotropic(Vector3::new(i as f64 * step, 0.0, 0.0), sigma)
            })
            .collect();
        BsplineTrajectory::new(0, cps).unwrap()
    }

    fn unit_model(lambda: f64) -> MeasurementModel {
        // Chosen so detection noise + spread + interpolated covariance = I
        // when the detection sits at u = 0 of a sigma-1/2 trajectory? Tests
        // instead use zero spline covariance via a tiny sigma.
        MeasurementModel {
            source_spread_covariance: Matrix3::identity() * 0.5,
            poisson_rate: lambda,
        }
    }

    /// Model and trajectory arranged so the total covariance at the best
    /// interpolated point is the identity.
    fn identity_total() -> (BsplineTrajectory, MeasurementModel) {
        let traj = straight(3, 10.0, 1e-6);
        let model = MeasurementModel {
            source_spread_covariance: Matrix3::identity() * 0.5,
            poisson_rate: 1.0,
        };
        (traj, model)
    }

    #[test]
    fn single_loglik_at_mean_and_offset() {
        let (traj, model) = identity_total();
        let mean = traj.interpolate(1, 0.0).unwrap().position_mean;
        let det = LaneDetectionPoint {
            position: mean,
            noise_covariance: Matrix3::identity() * 0.5,
            time_step: 0,
        };
        let ll0 = single_measurement_loglik(&traj, &det, &model);
        let expected = -1.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(ll0, expected, epsilon = 1e-6);

        let det_off = LaneDetectionPoint {
            position: mean + Vector3::new(0.0, 1.0, 0.0),
            noise_covariance: Matrix3::identity() * 0.5,
            time_step: 0,
        };
        let ll1 = single_measurement_loglik(&traj, &det_off, &model);
        assert_relative_eq!(ll1, expected - 0.5, epsilon = 1e-6);
    }

    #[test]
    fn set_loglik_examples() {
        let (traj, model) = identity_total();
        let model2 = MeasurementModel {
            poisson_rate: 2.0,
            ..model.clone()
        };
        assert_relative_eq!(set_loglik(&traj, &[], &model2), -2.0, epsilon = 1e-12);

        let mean = traj.interpolate(1, 0.0).unwrap().position_mean;
        let det = LaneDetectionPoint {
            position: mean,
            noise_covariance: Matrix3::identity() * 0.5,
            time_step: 0,
        };
        let ll = set_loglik(&traj, &[det.clone()], &model);
        let expected = -1.0 - 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(ll, expected, epsilon = 1e-6);

        // Two detections: sum of the single terms minus lambda.
        let det2 = LaneDetectionPoint {
            position: mean + Vector3::new(0.2, 0.1, 0.0),
            time_step: 0,
            noise_covariance: Matrix3::identity() * 0.5,
        };
        let both = set_loglik(&traj, &[det.clone(), det2.clone()], &model);
        let s1 = single_measurement_loglik(&traj, &det, &model);
        let s2 = single_measurement_loglik(&traj, &det2, &model);
        assert_relative_eq!(both, -1.0 + 2.0 * 1.0f64.ln() + s1 + s2, epsilon = 1e-12);
    }

    #[test]
    fn set_loglik_permutation_invariant() {
        let (traj, model) = identity_total();
        let dets: Vec<LaneDetectionPoint> = (0..4)
            .map(|i| LaneDetectionPoint {
                position: Vector3::new(4.0 + i as f64, 0.1 * i as f64, 0.0),
                noise_covariance: Matrix3::identity() * 0.5,
                time_step: 0,
            })
            .collect();
        let mut rev = dets.clone();
        rev.reverse();
        assert_eq!(set_loglik(&traj, &dets, &model), set_loglik(&traj, &rev, &model));
    }

    #[test]
    fn update_with_on_spline_detections_is_stable() {
        let traj = straight(5, 10.0, 0.5);
        let model = unit_model(5.0);
        let dets: Vec<LaneDetectionPoint> = (0..5)
            .map(|j| {
                let u = 0.1 + 0.18 * j as f64;
                LaneDetectionPoint {
                    position: traj.interpolate(traj.segment_count(), u).unwrap().position_mean,
                    noise_covariance: Matrix3::identity() * 0.05,
                    time_step: 1,
                }
            })
            .collect();
        let updated = recursive_update(&traj, &dets, &model);
        for seg in 1..=traj.segment_count() {
            for t in 0..10 {
                let u = t as f64 / 10.0;
                let a = traj.interpolate(seg, u).unwrap().position_mean;
                let b = updated.interpolate(seg, u).unwrap().position_mean;
                assert_relative_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn update_moves_toward_offset_detections() {
        let traj = straight(5, 10.0, 0.5);
        let model = MeasurementModel {
            source_spread_covariance: Matrix3::identity() * 1e-4,
            poisson_rate: 5.0,
        };
        let offset = Vector3::new(0.0, 0.5, 0.0);
        let dets: Vec<LaneDetectionPoint> = (0..8)
            .map(|j| {
                let u = 0.05 + 0.12 * j as f64;
                LaneDetectionPoint {
                    position: traj.interpolate(traj.segment_count(), u).unwrap().position_mean + offset,
                    noise_covariance: Matrix3::identity() * 1e-4,
                    time_step: 1,
                }
            })
            .collect();
        let updated = recursive_update(&traj, &dets, &model);
        let before = traj.interpolate(traj.segment_count(), 0.5).unwrap().position_mean;
        let after = updated.interpolate(traj.segment_count(), 0.5).unwrap().position_mean;
        assert!(after.y > before.y + 0.3, "tight measurements should pull the spline");
        // Covariances must not grow.
        for (u, p) in updated.control_points().iter().zip(traj.control_points()) {
            assert!(u.covariance().trace() <= p.covariance().trace() + 1e-12);
        }
    }

    #[test]
    fn update_with_empty_or_gated_out_detections_is_identity() {
        let traj = straight(4, 10.0, 0.5);
        let model = unit_model(5.0);
        let updated = recursive_update(&traj, &[], &model);
        assert_eq!(updated.len(), traj.len());
        for (a, b) in updated.control_points().iter().zip(traj.control_points()) {
            assert_eq!(a.mean, b.mean);
        }

        // A detection 100 m off the lane fails the gate.
        let far = LaneDetectionPoint {
            position: Vector3::new(20.0, 100.0, 0.0),
            noise_covariance: Matrix3::identity() * 0.1,
            time_step: 1,
        };
        let updated = recursive_update(&traj, &[far], &model);
        for (a, b) in updated.control_points().iter().zip(traj.control_points()) {
            assert_eq!(a.mean, b.mean);
        }
    }

    #[test]
    fn infinite_noise_leaves_means_unchanged() {
        let traj = straight(4, 10.0, 0.5);
        let model = MeasurementModel {
            source_spread_covariance: Matrix3::identity() * 1e12,
            poisson_rate: 5.0,
        };
        let dets: Vec<LaneDetectionPoint> = (0..5)
            .map(|j| LaneDetectionPoint {
                position: Vector3::new(15.0 + 2.0 * j as f64, 0.4, 0.0),
                noise_covariance: Matrix3::identity() * 1e12,
                time_step: 1,
            })
            .collect();
        let updated = recursive_update(&traj, &dets, &model);
        for (a, b) in updated.control_points().iter().zip(traj.control_points()) {
            assert!((a.mean - b.mean).norm() < 1e-6);
        }
    }

    #[test]
    fn estimator_extends_when_tracking_past_the_end() {
        let truth = straight(40, 10.0, 0.1); // long reference line to sample from
        let seed = straight(3, 15.0, 1.0);
        let model = MeasurementModel {
            source_spread_covariance: Matrix3::identity() * 0.02,
            poisson_rate: 10.0,
        };
        let mut est = LaneEstimator::new(seed, model, 0);
        let initial_len = est.trajectory().len();
        // Feed detections marching down the line, 5 m per scan.
        for k in 0..40 {
            let x0 = 5.0 * k as f64;
            let dets: Vec<LaneDetectionPoint> = (0..8)
                .map(|j| {
                    let x = x0 + j as f64;
                    let p = truth
                        .sample_means(4)
                        .into_iter()
                        .min_by(|a, b| {
                            (a.x - x).abs().partial_cmp(&(b.x - x).abs()).unwrap()
                        })
                        .unwrap();
                    LaneDetectionPoint {
                        position: p,
                        noise_covariance: Matrix3::identity() * 0.02,
                        time_step: k,
                    }
                })
                .collect();
            est.step(&dets, k);
        }
        assert!(
            est.trajectory().len() > initial_len,
            "estimator should append control points while the vehicle advances"
        );
        assert_eq!(est.control_point_steps().len(), est.trajectory().len());
    }
}
