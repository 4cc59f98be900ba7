//! Shared geometric and map data types.

mod camera;
mod config;
mod gaussian;
mod map;
mod pose;
mod prediction;
mod trajectory;

pub use camera::CameraIntrinsics;
pub use config::{CoarseWeighting, Config};
pub use gaussian::{Gaussian, SYMMETRY_TOLERANCE, UNIT_TOLERANCE};
pub use map::{GaussianMap, Violation, VoxelKey};
pub use pose::{rotation_error, RigidPose, ORTHONORMAL_TOLERANCE};
pub use prediction::Prediction;
pub use trajectory::{Trajectory, TrajectoryEntry};

/// Invariant violations of `map`; empty iff it is valid.
pub fn validate(map: &GaussianMap) -> Vec<Violation> {
    map.validate()
}
