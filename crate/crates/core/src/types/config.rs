use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How composed correspondences are weighted in the coarse rigid fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseWeighting {
    /// Reuse the per-pair weights of the ICP that produced the pairs.
    IcpWeights,
    Uniform,
}

/// Every tunable of the mapper.
///
/// The first block mirrors the published parameter table; the rest are
/// implementation choices. Unknown JSON keys are rejected, missing ones take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// FIFO buffer capacity |S|.
    pub buffer_size: usize,
    /// Points per Gaussian per frame when choosing the cluster count.
    pub lambda: f64,
    /// Mean normal agreement gate.
    pub tau_n: f64,
    /// Mahalanobis gate.
    pub tau_sigma: f64,
    /// Gaussians considered per measurement point.
    pub k: usize,
    /// Normal-agreement weight in the responsibility logit.
    pub kappa_1: f64,
    /// Feature-cosine weight in the responsibility logit.
    pub kappa_2: f64,
    /// Integration gate in log space.
    pub tau_pi: f64,
    /// Image-plane candidates per refinement Gaussian.
    pub k_2d: usize,
    /// Image-plane Mahalanobis merge gate.
    pub tau_sigma_2d: f64,

    /// Neighbors used to parameterize one Gaussian (M).
    pub neighbors_per_gaussian: usize,
    /// Eigenvalue floor for 3D covariances (m²).
    pub covariance_floor: f64,
    /// Eigenvalue floor for projected covariances (px²).
    pub covariance_floor_2d: f64,
    /// Voxel edge length of the map index (m).
    pub voxel_size: f64,
    /// Bounding-box expansion per axis, as a fraction of the extent.
    pub submap_margin: f64,
    pub icp_max_iterations: usize,
    /// Convergence threshold on the per-iteration pose update.
    pub icp_tolerance: f64,
    /// Pairs farther than this multiple of the median pair distance are dropped.
    pub icp_gate_factor: f64,
    /// Share of the geometric term in colored ICP.
    pub colored_icp_geometric_weight: f64,
    /// Neighbors used to fit per-point color gradients in colored ICP.
    pub colored_icp_neighbors: usize,
    /// Pairs whose normals agree less than this (absolute cosine) are dropped
    /// when source normals are available.
    pub icp_normal_agreement: f64,
    /// Largest number of source points fed to registration (uniformly strided).
    pub icp_max_source_points: usize,
    pub coarse_weighting: CoarseWeighting,
    /// Only every `frame_stride`-th source frame is processed.
    pub frame_stride: usize,
    pub kmeans_max_iterations: usize,
    /// Use `d²` instead of `d` in the neighborhood kernel exponent.
    pub squared_kernel: bool,
    /// Floor on the isotropy score.
    pub delta_min: f64,
    /// Total responsibility a Gaussian needs to receive an M-step.
    pub responsibility_min: f64,
    /// Constant splat opacity.
    pub opacity: f64,
    /// Accumulated alpha at which rendered depth counts as valid.
    pub alpha_valid: f64,
    /// A measurement Gaussian merges only if its rendered depth exceeds the
    /// map's minus this slack (m).
    pub refine_depth_tolerance: f64,
    pub near_plane: f64,
    /// Feature dimension D.
    pub feature_dim: usize,
    /// Pixel stride of the densified point cloud used for completion metrics;
    /// 0 disables densification.
    pub densify_stride: usize,
    /// Seed for every random choice in the pipeline.
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            buffer_size: 10,
            lambda: 128.0,
            tau_n: 0.5,
            tau_sigma: 4.6,
            k: 16,
            kappa_1: 5.0,
            kappa_2: 5.0,
            tau_pi: 8.0,
            k_2d: 3,
            tau_sigma_2d: 4.6,

            neighbors_per_gaussian: 32,
            covariance_floor: 1e-8,
            covariance_floor_2d: 0.3,
            voxel_size: 0.2,
            submap_margin: 0.1,
            icp_max_iterations: 50,
            icp_tolerance: 1e-6,
            icp_gate_factor: 3.0,
            colored_icp_geometric_weight: 0.968,
            colored_icp_neighbors: 12,
            icp_normal_agreement: 0.8,
            icp_max_source_points: 6000,
            coarse_weighting: CoarseWeighting::IcpWeights,
            frame_stride: 10,
            kmeans_max_iterations: 25,
            squared_kernel: false,
            delta_min: 0.01,
            responsibility_min: 1e-3,
            opacity: 0.8,
            alpha_valid: 0.5,
            refine_depth_tolerance: 0.0,
            near_plane: 0.01,
            feature_dim: 16,
            densify_stride: 2,
            seed: 0,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("lambda", self.lambda),
            ("tau_n", self.tau_n),
            ("tau_sigma", self.tau_sigma),
            ("kappa_1", self.kappa_1),
            ("kappa_2", self.kappa_2),
            ("tau_pi", self.tau_pi),
            ("tau_sigma_2d", self.tau_sigma_2d),
            ("covariance_floor", self.covariance_floor),
            ("covariance_floor_2d", self.covariance_floor_2d),
            ("voxel_size", self.voxel_size),
            ("submap_margin", self.submap_margin),
            ("icp_tolerance", self.icp_tolerance),
            ("icp_gate_factor", self.icp_gate_factor),
            ("icp_normal_agreement", self.icp_normal_agreement),
            ("colored_icp_geometric_weight", self.colored_icp_geometric_weight),
            ("delta_min", self.delta_min),
            ("responsibility_min", self.responsibility_min),
            ("opacity", self.opacity),
            ("alpha_valid", self.alpha_valid),
            ("near_plane", self.near_plane),
            ("refine_depth_tolerance", self.refine_depth_tolerance),
        ];
        if let Some((name, v)) = scalars.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("config {name} is not finite ({v})")));
        }
        let counts = [
            ("k", self.k),
            ("k_2d", self.k_2d),
            ("neighbors_per_gaussian", self.neighbors_per_gaussian),
            ("buffer_size", self.buffer_size),
            ("frame_stride", self.frame_stride),
            ("feature_dim", self.feature_dim),
            ("icp_max_iterations", self.icp_max_iterations),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidInput(format!("config {name} must be at least 1")));
        }
        let positive = [
            ("lambda", self.lambda),
            ("voxel_size", self.voxel_size),
            ("covariance_floor", self.covariance_floor),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v <= 0.0) {
            return Err(Error::InvalidInput(format!("config {name} must be positive")));
        }
        if !(self.opacity > 0.0 && self.opacity <= 1.0) {
            return Err(Error::InvalidInput("config opacity must lie in (0,1]".into()));
        }
        if !(self.delta_min > 0.0 && self.delta_min <= 1.0) {
            return Err(Error::InvalidInput("config delta_min must lie in (0,1]".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_table() {
        let c = Config::default();
        assert_eq!(c.buffer_size, 10);
        assert_eq!(c.lambda, 128.0);
        assert_eq!(c.tau_n, 0.5);
        assert_eq!(c.tau_sigma, 4.6);
        assert_eq!(c.k, 16);
        assert_eq!((c.kappa_1, c.kappa_2), (5.0, 5.0));
        assert_eq!(c.tau_pi, 8.0);
        assert_eq!(c.k_2d, 3);
        assert_eq!(c.tau_sigma_2d, 4.6);
        c.validate().unwrap();
    }

    #[test]
    fn json_round_trip_and_partial_override() {
        let c = Config::default();
        assert_eq!(Config::from_json(&c.to_json()).unwrap(), c);
        let partial = Config::from_json(r#"{"k": 8, "tau_pi": 6.5}"#).unwrap();
        assert_eq!(partial.k, 8);
        assert_eq!(partial.tau_pi, 6.5);
        assert_eq!(partial.lambda, 128.0);
    }

    #[test]
    fn rejects_unknown_keys_and_zero_counts() {
        assert!(Config::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(Config::from_json(r#"{"k": 0}"#).is_err());
    }
}
