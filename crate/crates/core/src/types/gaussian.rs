use nalgebra::{Matrix3, Vector3};

use crate::linalg::{norm, sorted_eigen};

/// Largest `‖Σ − Σᵀ‖∞` accepted as symmetric.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;
/// Accepted deviation of normal and feature norms from one.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// One map primitive.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    /// RGB in `[0, 1]`.
    pub color: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// Fixed appearance feature, unit length.
    pub feature: Vec<f64>,
    /// Running-average blend weight, in `(0, 1]`; new Gaussians start at 1.
    pub blend_state: f64,
}

impl Gaussian {
    /// Invariant violations of this Gaussian as human-readable messages.
    pub fn violations(&self, covariance_floor: f64) -> Vec<String> {
        let mut out = Vec::new();
        if !self.mean.iter().all(|v| v.is_finite()) {
            out.push("mean is not finite".to_string());
        }
        let asym = (self.covariance - self.covariance.transpose()).amax();
        if !(asym <= SYMMETRY_TOLERANCE) {
            out.push(format!("covariance not symmetric (asymmetry {asym:e})"));
        } else {
            let (vals, _) = sorted_eigen(&self.covariance);
            // Eigen-decomposition rounding can land a floored eigenvalue a few
            // ulps under the floor.
            let limit = covariance_floor * (1.0 - 1e-6);
            if !(vals[0] >= limit) {
                out.push(format!(
                    "covariance eigenvalue {:e} below floor {covariance_floor:e}",
                    vals[0]
                ));
            }
        }
        if !self.color.iter().all(|c| (0.0..=1.0).contains(c)) {
            out.push(format!("color {:?} outside [0,1]", self.color.as_slice()));
        }
        let n = self.normal.norm();
        if !((n - 1.0).abs() <= UNIT_TOLERANCE) {
            out.push(format!("normal not unit (norm {n})"));
        }
        let f = norm(&self.feature);
        if !((f - 1.0).abs() <= UNIT_TOLERANCE) {
            out.push(format!("feature not unit (norm {f})"));
        }
        if !(self.blend_state > 0.0 && self.blend_state <= 1.0) {
            out.push(format!("blend_state {} outside (0,1]", self.blend_state));
        }
        out
    }
}
