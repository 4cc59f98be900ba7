use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::linalg::renormalize_rotation;

/// Tolerance on `RᵀR − I` and `det R − 1` accepted by [`RigidPose::new`].
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-9;

/// A proper rigid transform `x ↦ R·x + t`.
///
/// Camera poses are stored camera-to-world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal with `det = +1`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !is_rotation(&rotation) {
            return Err(Error::InvalidInput(format!(
                "rotation is not orthonormal with det +1: {rotation}"
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("translation is not finite".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: renormalize_rotation(rotation.matrix()),
            translation,
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self::from_rotation(rot, translation)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Exponential-style update from a twist `[ω, v]`: rotation `exp(ω)`,
    /// translation `v`.
    pub fn from_twist(twist: &Vector6<f64>) -> Self {
        let omega = Vector3::new(twist[0], twist[1], twist[2]);
        let v = Vector3::new(twist[3], twist[4], twist[5]);
        Self::from_rotation(Rotation3::new(omega), v)
    }

    /// Camera pose looking from `eye` toward `target` (camera +z forward,
    /// +y down, as in the pinhole convention used everywhere here).
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let mut x = z.cross(up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::new(1.0, 0.0, 0.0));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rot = Matrix3::from_columns(&[x, y, z]);
        Self {
            rotation: renormalize_rotation(&rot),
            translation: *eye,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: renormalize_rotation(&(self.rotation * other.rotation)),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidInput(format!(
                "homogeneous row must be [0 0 0 1], got {bottom:?}"
            )));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// 4x4 row-major matrix entries.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        std::array::from_fn(|i| m[(i / 4, i % 4)])
    }

    /// Parses a 4x4 row-major matrix, snapping the rotation onto SO(3) when it
    /// is within `tolerance` of it (text round trips lose a few ulps).
    pub fn from_row_major(rows: &[f64], tolerance: f64) -> Result<Self> {
        if rows.len() != 16 {
            return Err(Error::InvalidInput(format!(
                "pose needs 16 entries, got {}",
                rows.len()
            )));
        }
        let m = Matrix4::from_row_slice(rows);
        let rot = m.fixed_view::<3, 3>(0, 0).into_owned();
        if rotation_error(&rot) > tolerance {
            return Err(Error::InvalidInput(
                "pose rotation is not orthonormal".into(),
            ));
        }
        Self::new(
            renormalize_rotation(&rot),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Rotation angle (radians) of `self⁻¹ ∘ other`.
    pub fn angle_to(&self, other: &RigidPose) -> f64 {
        let r = self.rotation.transpose() * other.rotation;
        // atan2 keeps precision near zero where acos of the trace does not.
        let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() * 0.5;
        s.atan2((r.trace() - 1.0) * 0.5)
    }

    pub fn distance_to(&self, other: &RigidPose) -> f64 {
        (self.translation - other.translation).norm()
    }

    pub fn is_valid(&self) -> bool {
        is_rotation(&self.rotation) && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Max of `‖RᵀR − I‖∞` and `|det R − 1|`.
pub fn rotation_error(r: &Matrix3<f64>) -> f64 {
    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    ortho.max((r.determinant() - 1.0).abs())
}

fn is_rotation(r: &Matrix3<f64>) -> bool {
    r.iter().all(|v| v.is_finite()) && rotation_error(r) <= ORTHONORMAL_TOLERANCE
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_reflection() {
        let r = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidPose::new(r, Vector3::zeros()).is_err());
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let p = RigidPose::from_axis_angle(&Vector3::new(0.3, -1.0, 0.2), 0.7, Vector3::new(1.0, 2.0, 3.0));
        let id = p.compose(&p.inverse());
        assert!(id.angle_to(&RigidPose::identity()) < 1e-12);
        assert!(id.translation().norm() < 1e-12);
        assert!(id.is_valid());
    }

    #[test]
    fn row_major_round_trip() {
        let p = RigidPose::from_axis_angle(&Vector3::z(), 0.4, Vector3::new(0.5, 0.0, -1.0));
        let q = RigidPose::from_row_major(&p.to_row_major(), 1e-6).unwrap();
        assert!(p.angle_to(&q) < 1e-12 && p.distance_to(&q) < 1e-15);
    }

    #[test]
    fn look_at_points_z_axis_at_target() {
        let eye = Vector3::new(1.0, 1.0, 0.0);
        let target = Vector3::new(1.0, 1.0, 5.0);
        let p = RigidPose::look_at(&eye, &target, &Vector3::new(0.0, -1.0, 0.0));
        let fwd = p.transform_vector(&Vector3::z());
        assert!((fwd - Vector3::z()).norm() < 1e-12);
        assert!(p.is_valid());
    }
}
