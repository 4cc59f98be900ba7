//! Producers of pixel-aligned predictions.

mod bundle;
mod noise;
mod scene;
mod synthetic;

pub use bundle::{write_bundle, BundleMeta, BundleSource};
pub use noise::{NoiseModel, SmoothField};
pub use scene::{
    box_patches, ground_truth, random_class_features, sample_surfaces, visible_from, Hit, Patch, SceneSpec,
    SurfaceSamples, SurfaceSpec, SyntheticScene, Texture,
};
pub use synthetic::{mix_seed, CameraSpec, OrbitSpec, SyntheticSource, SyntheticSpec};

use crate::error::Result;
use crate::types::{CameraIntrinsics, Prediction, RigidPose};

/// Something that turns a set of frames into predictions in one common
/// frame, like a multi-view geometry network would.
///
/// Frames are numbered `0..len()`. Sources are queried serially but may be
/// moved across threads.
pub trait ObservationSource: Send {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Capture time of a frame (s).
    fn timestamp(&self, frame: u64) -> f64;

    fn intrinsics(&self) -> CameraIntrinsics;

    fn feature_dim(&self) -> usize;

    /// One prediction per requested frame, in request order. When hints are
    /// given, the first hinted frame's predicted pose equals its hint.
    fn infer(&mut self, frames: &[u64], pose_hints: &[(u64, RigidPose)]) -> Result<Vec<Prediction>>;
}

impl<S: ObservationSource + ?Sized> ObservationSource for Box<S> {
    fn len(&self) -> usize {
        (**self).len()
    }

    fn timestamp(&self, frame: u64) -> f64 {
        (**self).timestamp(frame)
    }

    fn intrinsics(&self) -> CameraIntrinsics {
        (**self).intrinsics()
    }

    fn feature_dim(&self) -> usize {
        (**self).feature_dim()
    }

    fn infer(&mut self, frames: &[u64], pose_hints: &[(u64, RigidPose)]) -> Result<Vec<Prediction>> {
        (**self).infer(frames, pose_hints)
    }
}
