//! Closed-form weighted point-set alignment (Kabsch / Umeyama).

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::linalg::renormalize_rotation;
use crate::types::RigidPose;

/// `x ↦ scale·R·x + t`.
#[derive(Debug, Clone, Copy)]
pub struct Similarity {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Similarity {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    /// The rigid part; only meaningful when `scale` is 1.
    pub fn rigid(&self) -> RigidPose {
        RigidPose::new(renormalize_rotation(&self.rotation), self.translation)
            .expect("alignment rotation is orthonormal")
    }
}

/// Least-squares transform mapping `src[i]` onto `dst[i]`, optionally with a
/// uniform scale. Weights default to one.
pub fn umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: Option<&[f64]>,
    with_scale: bool,
) -> Result<Similarity> {
    if src.len() != dst.len() {
        return Err(Error::InvalidInput(format!(
            "alignment needs paired points ({} vs {})",
            src.len(),
            dst.len()
        )));
    }
    if src.is_empty() {
        return Err(Error::InvalidInput("alignment needs at least one pair".into()));
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..src.len()).map(w).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("alignment weights sum to zero".into()));
    }
    let mu_s = (0..src.len()).map(|i| src[i] * w(i)).sum::<Vector3<f64>>() / total;
    let mu_d = (0..dst.len()).map(|i| dst[i] * w(i)).sum::<Vector3<f64>>() / total;

    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for i in 0..src.len() {
        let ds = src[i] - mu_s;
        let dd = dst[i] - mu_d;
        cov += dd * ds.transpose() * w(i);
        var_s += ds.norm_squared() * w(i);
    }
    cov /= total;
    var_s /= total;

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        d.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&d) * v_t;
    let scale = if with_scale {
        if var_s <= 0.0 {
            return Err(Error::InvalidInput("source points are coincident; scale undefined".into()));
        }
        svd.singular_values.component_mul(&d).sum() / var_s
    } else {
        1.0
    };
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Similarity {
        rotation,
        translation,
        scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> Vec<Vector3<f64>> {
        vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 2.0, 0.0),
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::new(1.0, 1.0, 1.0),
        ]
    }

    #[test]
    fn recovers_rigid_transform() {
        let truth = RigidPose::from_axis_angle(&Vector3::new(1.0, 2.0, 0.5), 0.9, Vector3::new(0.3, -1.0, 2.0));
        let src = cloud();
        let dst: Vec<_> = src.iter().map(|p| truth.transform_point(p)).collect();
        let fit = umeyama(&src, &dst, None, false).unwrap().rigid();
        assert!(fit.angle_to(&truth) < 1e-12);
        assert!(fit.distance_to(&truth) < 1e-12);
    }

    #[test]
    fn recovers_scale() {
        let src = cloud();
        let dst: Vec<_> = src.iter().map(|p| p * 2.5 + Vector3::new(1.0, 0.0, 0.0)).collect();
        let fit = umeyama(&src, &dst, None, true).unwrap();
        assert!((fit.scale - 2.5).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_pairs_are_ignored() {
        let src = cloud();
        let mut dst = src.clone();
        dst[4] = Vector3::new(100.0, 100.0, 100.0);
        let w = [1.0, 1.0, 1.0, 1.0, 0.0];
        let fit = umeyama(&src, &dst, Some(&w), false).unwrap().rigid();
        assert!(fit.angle_to(&RigidPose::identity()) < 1e-12);
    }
}
