use std::collections::HashMap;

use nalgebra::Vector3;

use super::Gaussian;

/// Integer voxel coordinates of a cell.
pub type VoxelKey = [i64; 3];

/// A single invariant violation found by [`GaussianMap::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Offending Gaussian, or `None` for index-level problems.
    pub gaussian: Option<usize>,
    pub message: String,
}

/// The global mixture plus a voxel hash over Gaussian means.
///
/// Readers may share a `&GaussianMap`; every mutation goes through
/// `&mut self` so the voxel index is rebucketed in the same call that moves a
/// mean.
#[derive(Debug, Clone)]
pub struct GaussianMap {
    gaussians: Vec<Gaussian>,
    keys: Vec<VoxelKey>,
    index: HashMap<VoxelKey, Vec<usize>>,
    voxel_size: f64,
    covariance_floor: f64,
    feature_dim: usize,
}

impl GaussianMap {
    pub fn new(voxel_size: f64, covariance_floor: f64, feature_dim: usize) -> Self {
        assert!(voxel_size > 0.0, "voxel size must be positive");
        Self {
            gaussians: Vec::new(),
            keys: Vec::new(),
            index: HashMap::new(),
            voxel_size,
            covariance_floor,
            feature_dim,
        }
    }

    pub fn from_gaussians(
        gaussians: Vec<Gaussian>,
        voxel_size: f64,
        covariance_floor: f64,
        feature_dim: usize,
    ) -> Self {
        let mut map = Self::new(voxel_size, covariance_floor, feature_dim);
        for g in gaussians {
            map.push(g);
        }
        map
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn covariance_floor(&self) -> f64 {
        self.covariance_floor
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }

    pub fn get(&self, i: usize) -> &Gaussian {
        &self.gaussians[i]
    }

    pub fn voxel_key(&self, p: &Vector3<f64>) -> VoxelKey {
        let s = self.voxel_size;
        [
            (p.x / s).floor() as i64,
            (p.y / s).floor() as i64,
            (p.z / s).floor() as i64,
        ]
    }

    /// Appends a Gaussian and returns its index.
    pub fn push(&mut self, g: Gaussian) -> usize {
        let i = self.gaussians.len();
        let key = self.voxel_key(&g.mean);
        self.index.entry(key).or_default().push(i);
        self.keys.push(key);
        self.gaussians.push(g);
        i
    }

    /// Replaces Gaussian `i`, rebucketing it if its mean changed cell.
    pub fn set(&mut self, i: usize, g: Gaussian) {
        let new_key = self.voxel_key(&g.mean);
        let old_key = self.keys[i];
        if new_key != old_key {
            if let Some(bucket) = self.index.get_mut(&old_key) {
                bucket.retain(|&j| j != i);
                if bucket.is_empty() {
                    self.index.remove(&old_key);
                }
            }
            self.index.entry(new_key).or_default().push(i);
            self.keys[i] = new_key;
        }
        self.gaussians[i] = g;
    }

    /// Gaussian indices stored in the cell containing `p`.
    pub fn lookup(&self, p: &Vector3<f64>) -> &[usize] {
        self.cell(&self.voxel_key(p))
    }

    pub fn cell(&self, key: &VoxelKey) -> &[usize] {
        self.index.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Occupied cells, in unspecified order.
    pub fn occupied_cells(&self) -> impl Iterator<Item = (&VoxelKey, &[usize])> {
        self.index.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn means(&self) -> Vec<Vector3<f64>> {
        self.gaussians.iter().map(|g| g.mean).collect()
    }

    /// Lists every violated invariant; empty iff the map is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (i, g) in self.gaussians.iter().enumerate() {
            for message in g.violations(self.covariance_floor) {
                out.push(Violation {
                    gaussian: Some(i),
                    message,
                });
            }
            if g.feature.len() != self.feature_dim {
                out.push(Violation {
                    gaussian: Some(i),
                    message: format!(
                        "feature has {} dims, map expects {}",
                        g.feature.len(),
                        self.feature_dim
                    ),
                });
            }
        }

        let mut seen = vec![0usize; self.gaussians.len()];
        for (key, bucket) in &self.index {
            for &i in bucket {
                if i >= self.gaussians.len() {
                    out.push(Violation {
                        gaussian: None,
                        message: format!("voxel {key:?} holds out-of-range index {i}"),
                    });
                    continue;
                }
                seen[i] += 1;
                if self.voxel_key(&self.gaussians[i].mean) != *key {
                    out.push(Violation {
                        gaussian: Some(i),
                        message: format!("indexed in voxel {key:?} but mean lies elsewhere"),
                    });
                }
            }
        }
        for (i, &count) in seen.iter().enumerate() {
            if count != 1 {
                out.push(Violation {
                    gaussian: Some(i),
                    message: format!("appears in {count} voxel cells"),
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use nalgebra::Matrix3;

    use super::*;

    fn gaussian_at(p: Vector3<f64>) -> Gaussian {
        Gaussian {
            mean: p,
            covariance: Matrix3::identity() * 1e-4,
            color: Vector3::repeat(0.5),
            normal: Vector3::z(),
            feature: vec![1.0, 0.0, 0.0],
            blend_state: 1.0,
        }
    }

    #[test]
    fn empty_map_is_valid() {
        assert!(GaussianMap::new(0.2, 1e-8, 3).validate().is_empty());
    }

    #[test]
    fn single_identity_scaled_gaussian_is_valid() {
        let map = GaussianMap::from_gaussians(vec![gaussian_at(Vector3::zeros())], 0.2, 1e-8, 3);
        assert!(map.validate().is_empty());
    }

    #[test]
    fn non_unit_normal_is_one_violation() {
        let mut g = gaussian_at(Vector3::zeros());
        g.normal = Vector3::new(2.0, 0.0, 0.0);
        let map = GaussianMap::from_gaussians(vec![g], 0.2, 1e-8, 3);
        let v = map.validate();
        assert_eq!(v.len(), 1);
        assert!(v[0].message.contains("normal"));
    }

    #[test]
    fn set_rebuckets_moved_mean() {
        let mut map = GaussianMap::new(0.2, 1e-8, 3);
        let i = map.push(gaussian_at(Vector3::new(0.05, 0.05, 0.05)));
        map.push(gaussian_at(Vector3::new(0.1, 0.1, 0.1)));
        let moved = gaussian_at(Vector3::new(1.05, 0.05, 0.05));
        map.set(i, moved);
        assert_eq!(map.lookup(&Vector3::new(1.05, 0.05, 0.05)), &[i]);
        assert_eq!(map.lookup(&Vector3::new(0.1, 0.1, 0.1)), &[1]);
        assert!(map.validate().is_empty());
    }

    #[test]
    fn negative_coordinates_floor_into_their_cell() {
        let map = GaussianMap::new(0.2, 1e-8, 3);
        assert_eq!(map.voxel_key(&Vector3::new(-0.01, 0.0, 0.39)), [-1, 0, 1]);
    }
}
