//! Rigid-body poses in SE(3) with exponential/logarithm maps.

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// A pose: rotation (unit quaternion, always orthonormal) plus translation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PoseSe3 {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl PoseSe3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::from_matrix(r),
            translation,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Composition `self * other`.
    pub fn compose(&self, other: &PoseSe3) -> PoseSe3 {
        PoseSe3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSe3 {
        let inv_rot = self.rotation.inverse();
        PoseSe3 {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    /// Relative pose `self^-1 * other`.
    pub fn between(&self, other: &PoseSe3) -> PoseSe3 {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// SE(3) exponential of a twist `[rho, phi]` (translation part first).
    pub fn exp(xi: &Vector6<f64>) -> PoseSe3 {
        let rho = Vector3::new(xi[0], xi[1], xi[2]);
        let phi = Vector3::new(xi[3], xi[4], xi[5]);
        let angle = phi.norm();
        let rotation = UnitQuaternion::from_scaled_axis(phi);
        let v = left_jacobian(&phi, angle);
        PoseSe3 {
            rotation,
            translation: v * rho,
        }
    }

    /// SE(3) logarithm; inverse of [`PoseSe3::exp`].
    pub fn log(&self) -> Vector6<f64> {
        let phi = self.rotation.scaled_axis();
        let angle = phi.norm();
        let v_inv = left_jacobian_inverse(&phi, angle);
        let rho = v_inv * self.translation;
        Vector6::new(rho[0], rho[1], rho[2], phi[0], phi[1], phi[2])
    }

    /// Right-multiplicative retraction `self * exp(delta)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> PoseSe3 {
        self.compose(&PoseSe3::exp(delta))
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// The SO(3) left Jacobian `V`, used as the translation coupling in exp.
fn left_jacobian(phi: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let s = skew(phi);
    if angle < 1e-8 {
        Matrix3::identity() + 0.5 * s + s * s / 6.0
    } else {
        let a2 = angle * angle;
        Matrix3::identity() + (1.0 - angle.cos()) / a2 * s + (angle - angle.sin()) / (a2 * angle) * s * s
    }
}

fn left_jacobian_inverse(phi: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let s = skew(phi);
    if angle < 1e-8 {
        Matrix3::identity() - 0.5 * s + s * s / 12.0
    } else {
        let half = 0.5 * angle;
        let cot = half.cos() / half.sin();
        Matrix3::identity() - 0.5 * s + (1.0 - half * cot) / (angle * angle) * s * s
    }
}
