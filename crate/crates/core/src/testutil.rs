//! Fixtures shared by unit tests.

use nalgebra::{Matrix3, Vector3};

use crate::types::{CameraIntrinsics, Gaussian, Prediction, RigidPose};

/// A one-row prediction holding the given points, all valid.
pub fn row_prediction(
    frame_id: u64,
    points: &[Vector3<f64>],
    normals: &[Vector3<f64>],
    colors: &[Vector3<f64>],
    features: &[Vec<f64>],
) -> Prediction {
    let n = points.len();
    let dim = features.first().map_or(1, |f| f.len());
    Prediction {
        frame_id,
        points: points.to_vec(),
        valid: vec![true; n],
        colors: colors.to_vec(),
        normals: normals.to_vec(),
        features: features.iter().flatten().copied().collect(),
        feature_dim: dim,
        pose: RigidPose::identity(),
        intrinsics: CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0, n.max(1), 1).unwrap(),
    }
}

pub fn gaussian(mean: Vector3<f64>, diag: [f64; 3]) -> Gaussian {
    Gaussian {
        mean,
        covariance: Matrix3::from_diagonal(&Vector3::from(diag)),
        color: Vector3::repeat(0.5),
        normal: Vector3::z(),
        feature: vec![1.0, 0.0],
        blend_state: 1.0,
    }
}
