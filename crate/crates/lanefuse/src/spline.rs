//! Quadratic B-spline lane-line trajectories with Gaussian control points.
//!
//! A lane line is a uniform quadratic B-spline: each point of the continuous
//! curve is a fixed linear combination of three consecutive control points.
//! Control points are Gaussian (mean + covariance), and since the basis
//! weights are deterministic, every interpolated point is Gaussian too.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible covariance eigenvalue, in m². Keeps covariances
/// invertible for the information-form update.
pub const COVARIANCE_EIGENVALUE_FLOOR: f64 = 1e-9;

/// Fixed basis matrix of the uniform quadratic B-spline: the weight vector is
/// `B * [1, u, u^2]^T`.
const BASIS: Matrix3<f64> = Matrix3::new(
    0.5, -1.0, 0.5, //
    0.5, 1.0, -1.0, //
    0.0, 0.0, 0.5,
);

/// Basis weights of the three control points governing a segment, at local
/// parameter `u`.
///
/// The weights sum to 1, so interpolation is an affine combination:
/// `u = 0` gives the segment start `(x^i + x^{i+1}) / 2` and `u = 1` the
/// segment end `(x^{i+1} + x^{i+2}) / 2`.
pub fn basis_weights(u: f64) -> Result<Vector3<f64>> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::ParameterOutOfRange(u));
    }
    Ok(BASIS * Vector3::new(1.0, u, u * u))
}

/// A 3D control point with Gaussian uncertainty.
///
/// The covariance is regularized on construction: symmetrized and with
/// eigenvalues clamped to [`COVARIANCE_EIGENVALUE_FLOOR`], so it is always
/// symmetric positive definite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianControlPoint {
    pub mean: Vector3<f64>,
    covariance: Matrix3<f64>,
}

impl GaussianControlPoint {
    pub fn new(mean: Vector3<f64>, covariance: Matrix3<f64>) -> Self {
        Self {
            mean,
            covariance: regularize_covariance(covariance),
        }
    }

    /// Isotropic covariance with standard deviation `sigma` per axis.
    pub fn isotropic(mean: Vector3<f64>, sigma: f64) -> Self {
        Self::new(mean, Matrix3::identity() * sigma * sigma)
    }

    pub fn covariance(&self) -> &Matrix3<f64> {
        &self.covariance
    }

    /// Scales the covariance by `factor` (clamped to keep it PD).
    pub fn scale_covariance(&self, factor: f64) -> Self {
        Self::new(self.mean, self.covariance * factor.max(0.0))
    }
}

/// Symmetrize and clamp eigenvalues to the floor.
pub fn regularize_covariance(cov: Matrix3<f64>) -> Matrix3<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut values = eig.eigenvalues;
    let mut clamped = false;
    for v in values.iter_mut() {
        if *v < COVARIANCE_EIGENVALUE_FLOOR {
            *v = COVARIANCE_EIGENVALUE_FLOOR;
            clamped = true;
        }
    }
    if clamped {
        &eig.eigenvectors * Matrix3::from_diagonal(&values) * eig.eigenvectors.transpose()
    } else {
        sym
    }
}

/// An ordered sequence of Gaussian control points plus the time step at which
/// the trajectory was born. Control-point order defines the traversal
/// direction of the lane line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BsplineTrajectory {
    pub birth_time: i64,
    control_points: Vec<GaussianControlPoint>,
}

impl BsplineTrajectory {
    pub fn new(birth_time: i64, control_points: Vec<GaussianControlPoint>) -> Result<Self> {
        if control_points.len() < 3 {
            return Err(Error::TooFewControlPoints(control_points.len()));
        }
        Ok(Self {
            birth_time,
            control_points,
        })
    }

    pub fn control_points(&self) -> &[GaussianControlPoint] {
        &self.control_points
    }

    pub fn control_points_mut(&mut self) -> &mut [GaussianControlPoint] {
        &mut self.control_points
    }

    /// Number of control points `v`.
    pub fn len(&self) -> usize {
        self.control_points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // v >= 3 by construction
    }

    /// Number of segments `v - 2`.
    pub fn segment_count(&self) -> usize {
        self.control_points.len() - 2
    }

    /// Appends a control point at the end.
    pub fn push(&mut self, point: GaussianControlPoint) {
        self.control_points.push(point);
    }

    /// A new trajectory with control points in reverse order (opposite
    /// traversal direction, identical geometry).
    pub fn reversed(&self) -> Self {
        let mut control_points = self.control_points.clone();
        control_points.reverse();
        Self {
            birth_time: self.birth_time,
            control_points,
        }
    }

    /// Sub-trajectory over control points `range` (0-based, inclusive start,
    /// exclusive end). Fails if the slice has fewer than 3 points.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let part = self.control_points[start..end].to_vec();
        Self::new(self.birth_time, part)
    }

    /// End-to-end chord of the control polygon.
    pub fn chord(&self) -> Vector3<f64> {
        self.control_points.last().unwrap().mean - self.control_points[0].mean
    }

    /// Interpolates the point at (`segment_index`, `u`); `segment_index` is
    /// 1-based in `1..=v-2` as the segment is governed by control points
    /// `x^{i..i+2}`.
    pub fn interpolate(&self, segment_index: usize, u: f64) -> Result<InterpolatedPoint> {
        let v = self.len();
        if segment_index < 1 || segment_index > v - 2 {
            return Err(Error::SegmentOutOfRange {
                index: segment_index,
                control_points: v,
            });
        }
        let weights = basis_weights(u)?;
        let cps = &self.control_points[segment_index - 1..segment_index + 2];
        let mut mean = Vector3::zeros();
        let mut covariance = Matrix3::zeros();
        for (c, cp) in cps.iter().enumerate() {
            let w = weights[c];
            mean += w * cp.mean;
            // Independent control points: H blockdiag(P) H^T reduces to
            // sum of w^2 P per block.
            covariance += w * w * cp.covariance;
        }
        Ok(InterpolatedPoint {
            position_mean: mean,
            position_covariance: covariance,
            segment_index,
            local_parameter: u,
        })
    }

    /// Samples `samples_per_segment` points per segment at
    /// `u = (j-1)/samples_per_segment`, `j = 1..=samples_per_segment`,
    /// ordered by (segment, u). `u = 1` is never sampled; it coincides with
    /// the next segment's `u = 0`.
    pub fn sample_polyline(&self, samples_per_segment: usize) -> Vec<InterpolatedPoint> {
        assert!(samples_per_segment >= 1);
        let mut out = Vec::with_capacity(self.segment_count() * samples_per_segment);
        for segment in 1..=self.segment_count() {
            for j in 0..samples_per_segment {
                let u = j as f64 / samples_per_segment as f64;
                out.push(self.interpolate(segment, u).expect("in-range by loop bounds"));
            }
        }
        out
    }

    /// Interpolated means only, same sampling grid as [`sample_polyline`].
    ///
    /// [`sample_polyline`]: BsplineTrajectory::sample_polyline
    pub fn sample_means(&self, samples_per_segment: usize) -> Vec<Vector3<f64>> {
        self.sample_polyline(samples_per_segment)
            .into_iter()
            .map(|p| p.position_mean)
            .collect()
    }
}

/// A Gaussian point on the continuous curve.
#[derive(Debug, Clone)]
pub struct InterpolatedPoint {
    pub position_mean: Vector3<f64>,
    pub position_covariance: Matrix3<f64>,
    /// 1-based segment index in `1..=v-2`.
    pub segment_index: usize,
    /// Local parameter in `[0, 1]`.
    pub local_parameter: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn straight_trajectory(step: f64, n: usize, sigma: f64) -> BsplineTrajectory {
        let cps = (0..n)
            .map(|i| GaussianControlPoint::isotropic(Vector3::new(i as f64 * step, 0.0, 0.0), sigma))
            .collect();
        BsplineTrajectory::new(0, cps).unwrap()
    }

    #[test]
    fn basis_weights_at_endpoints_and_midpoint() {
        let w0 = basis_weights(0.0).unwrap();
        assert_relative_eq!(w0, Vector3::new(0.5, 0.5, 0.0), epsilon = 1e-15);
        let w1 = basis_weights(1.0).unwrap();
        assert_relative_eq!(w1, Vector3::new(0.0, 0.5, 0.5), epsilon = 1e-15);
        // Direct evaluation of the basis matrix-vector product at u = 0.5.
        let wm = basis_weights(0.5).unwrap();
        assert_relative_eq!(wm, Vector3::new(0.125, 0.75, 0.125), epsilon = 1e-15);
    }

    #[test]
    fn basis_weights_rejects_out_of_domain() {
        assert!(basis_weights(-0.1).is_err());
        assert!(basis_weights(1.1).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let traj = straight_trajectory(2.0, 3, 1.0);
        let p0 = traj.interpolate(1, 0.0).unwrap();
        assert_relative_eq!(p0.position_mean, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        let pm = traj.interpolate(1, 0.5).unwrap();
        assert_relative_eq!(pm.position_mean, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-12);
        // Identity covariances: (1/2)^2 + (1/2)^2 = 1/2 at u = 0.
        assert_relative_eq!(
            p0.position_covariance,
            Matrix3::identity() * 0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn interpolate_rejects_bad_segment() {
        let traj = straight_trajectory(1.0, 4, 1.0);
        assert!(traj.interpolate(0, 0.5).is_err());
        assert!(traj.interpolate(3, 0.5).is_err());
        assert!(traj.interpolate(2, 0.5).is_ok());
    }

    #[test]
    fn sample_polyline_grid_and_continuity() {
        let traj = straight_trajectory(1.0, 3, 1.0);
        let pts = traj.sample_polyline(4);
        assert_eq!(pts.len(), 4);
        let us: Vec<f64> = pts.iter().map(|p| p.local_parameter).collect();
        assert_eq!(us, vec![0.0, 0.25, 0.5, 0.75]);

        let traj = straight_trajectory(1.0, 5, 1.0);
        // Segment continuity: x(1) of segment i equals x(0) of segment i+1.
        for i in 1..traj.segment_count() {
            let end = traj.interpolate(i, 1.0).unwrap().position_mean;
            let start = traj.interpolate(i + 1, 0.0).unwrap().position_mean;
            assert_eq!(end, start);
        }
    }

    #[test]
    fn collinear_control_points_sample_equally_spaced() {
        let traj = straight_trajectory(2.0, 5, 1.0);
        let pts = traj.sample_means(4);
        for pair in pts.windows(2) {
            assert_relative_eq!((pair[1] - pair[0]).norm(), 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn covariance_floor_applied() {
        let cp = GaussianControlPoint::new(Vector3::zeros(), Matrix3::zeros());
        let eig = cp.covariance().symmetric_eigen();
        for v in eig.eigenvalues.iter() {
            assert!(*v >= COVARIANCE_EIGENVALUE_FLOOR * 0.999);
        }
    }

    #[test]
    fn rejects_too_few_control_points() {
        let cps = vec![
            GaussianControlPoint::isotropic(Vector3::zeros(), 1.0),
            GaussianControlPoint::isotropic(Vector3::new(1.0, 0.0, 0.0), 1.0),
        ];
        assert!(BsplineTrajectory::new(0, cps).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_unit() -> impl Strategy<Value = f64> {
            0.0..=1.0f64
        }

        fn arb_spd() -> impl Strategy<Value = Matrix3<f64>> {
            proptest::array::uniform9(-2.0..2.0f64).prop_map(|a| {
                let m = Matrix3::from_row_slice(&a);
                m * m.transpose() + Matrix3::identity() * 1e-3
            })
        }

        proptest! {
            #[test]
            fn partition_of_unity(u in arb_unit()) {
                let w = basis_weights(u).unwrap();
                prop_assert!((w.sum() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn affine_equivariance(u in arb_unit(), t in proptest::array::uniform3(-100.0..100.0f64)) {
                let t = Vector3::from_row_slice(&t);
                let traj = straight_trajectory(3.0, 4, 0.7);
                let mut shifted = traj.clone();
                for cp in shifted.control_points_mut() {
                    cp.mean += t;
                }
                let a = traj.interpolate(1, u).unwrap();
                let b = shifted.interpolate(1, u).unwrap();
                prop_assert!((b.position_mean - a.position_mean - t).norm() < 1e-9);
                prop_assert!((b.position_covariance - a.position_covariance).norm() < 1e-12);
            }

            #[test]
            fn interpolated_covariance_is_psd(u in arb_unit(), c0 in arb_spd(), c1 in arb_spd(), c2 in arb_spd()) {
                let cps = vec![
                    GaussianControlPoint::new(Vector3::zeros(), c0),
                    GaussianControlPoint::new(Vector3::new(1.0, 0.0, 0.0), c1),
                    GaussianControlPoint::new(Vector3::new(2.0, 0.0, 0.0), c2),
                ];
                let traj = BsplineTrajectory::new(0, cps).unwrap();
                let p = traj.interpolate(1, u).unwrap();
                let eig = p.position_covariance.symmetric_eigen();
                for v in eig.eigenvalues.iter() {
                    prop_assert!(*v > -1e-12);
                }
            }
        }
    }
}
