#![allow(dead_code)]

use std::path::PathBuf;

use gaussfuse::source::{NoiseModel, ObservationSource, SyntheticSource, SyntheticSpec};
use gaussfuse::types::{CameraIntrinsics, Prediction, RigidPose, Trajectory};
use gaussfuse::Result;

pub fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

pub fn room_spec() -> SyntheticSpec {
    SyntheticSpec::load(&data("room.json")).unwrap()
}

/// The room scene with its noise replaced.
pub fn room_source(noise: NoiseModel, frames: usize, seed: u64) -> SyntheticSource {
    let mut spec = room_spec();
    spec.noise = noise;
    // keep the same camera path, just cut it short
    let full = spec.trajectory.frames;
    spec.trajectory.sweep_deg *= (frames.max(2) - 1) as f64 / (full - 1) as f64;
    spec.trajectory.frames = frames;
    SyntheticSource::from_spec(&spec, seed).unwrap()
}

/// Ground-truth poses for the frames of `estimated`.
pub fn gt_for(source: &SyntheticSource, estimated: &Trajectory) -> Trajectory {
    let mut gt = Trajectory::new();
    for e in estimated.entries() {
        gt.push(e.frame_id, *source.gt_pose(e.frame_id).unwrap(), e.timestamp).unwrap();
    }
    gt
}

/// Wraps a source and blanks every prediction of one frame, so that frame
/// cannot be localized.
pub struct BlankFrame<S> {
    pub inner: S,
    pub frame: u64,
}

impl<S: ObservationSource> ObservationSource for BlankFrame<S> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn timestamp(&self, frame: u64) -> f64 {
        self.inner.timestamp(frame)
    }

    fn intrinsics(&self) -> CameraIntrinsics {
        self.inner.intrinsics()
    }

    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    fn infer(&mut self, frames: &[u64], pose_hints: &[(u64, RigidPose)]) -> Result<Vec<Prediction>> {
        let mut preds = self.inner.infer(frames, pose_hints)?;
        for p in preds.iter_mut().filter(|p| p.frame_id == self.frame) {
            p.valid.iter_mut().for_each(|v| *v = false);
        }
        Ok(preds)
    }
}
