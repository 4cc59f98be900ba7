use nalgebra::Vector3;

use super::{CameraIntrinsics, RigidPose};
use crate::error::{Error, Result};

/// One frame's pixel-aligned point map as emitted by an observation source.
///
/// All per-pixel arrays are row-major `height × width`. Points are in the
/// source's prediction frame until aligned, in the map frame afterwards.
/// Two predictions with the same `frame_id` index the same image rays.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub frame_id: u64,
    pub points: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
    pub colors: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    /// Flat `pixel_count × feature_dim` feature array.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    /// Camera-to-frame pose of the image.
    pub pose: RigidPose,
    pub intrinsics: CameraIntrinsics,
}

impl Prediction {
    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn pixel_count(&self) -> usize {
        self.intrinsics.pixel_count()
    }

    pub fn feature(&self, pixel: usize) -> &[f64] {
        &self.features[pixel * self.feature_dim..(pixel + 1) * self.feature_dim]
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        self.valid
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| v.then_some(i))
            .collect()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Checks that every per-pixel array matches the image shape.
    pub fn check_shape(&self) -> Result<()> {
        let n = self.pixel_count();
        let bad = |what: &str, len: usize| {
            Err(Error::InvalidInput(format!(
                "frame {}: {what} has {len} entries, expected {n}",
                self.frame_id
            )))
        };
        if self.points.len() != n {
            return bad("points", self.points.len());
        }
        if self.valid.len() != n {
            return bad("valid", self.valid.len());
        }
        if self.colors.len() != n {
            return bad("colors", self.colors.len());
        }
        if self.normals.len() != n {
            return bad("normals", self.normals.len());
        }
        if self.features.len() != n * self.feature_dim {
            return bad("features", self.features.len() / self.feature_dim.max(1));
        }
        Ok(())
    }

    /// Applies `transform` to points, normals and the camera pose.
    pub fn transformed(&self, transform: &RigidPose) -> Prediction {
        let mut out = self.clone();
        for (p, n) in out.points.iter_mut().zip(out.normals.iter_mut()) {
            *p = transform.transform_point(p);
            *n = transform.transform_vector(n);
        }
        out.pose = transform.compose(&self.pose);
        out
    }

    /// Valid points, colors, normals and their pixel indices.
    pub fn valid_cloud(&self) -> (Vec<usize>, Vec<Vector3<f64>>, Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        let idx = self.valid_indices();
        let pts = idx.iter().map(|&i| self.points[i]).collect();
        let cols = idx.iter().map(|&i| self.colors[i]).collect();
        let nrm = idx.iter().map(|&i| self.normals[i]).collect();
        (idx, pts, cols, nrm)
    }
}
