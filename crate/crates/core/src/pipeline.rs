//! Per-frame orchestration: buffer, inference requests, localization,
//! mixture update and refinement.
//!
//! Frames are processed at `config.frame_stride`. The first `buffer_size`
//! processed frames initialize the map. Afterwards each new frame `j` is
//! inferred together with the buffer and the anchor, and the frame before it
//! is the one integrated: its fresh prediction is localized through the
//! newest integrated frame, fused, and written back to the buffer. Frame `j`
//! itself gets a provisional pose chained from that result and is integrated
//! on the next request, or from the last request once the source runs out.

use std::collections::VecDeque;

use crate::cluster::initialize_map;
use crate::em::integrate;
use crate::error::{Error, Result};
use crate::registration::localize;
use crate::source::ObservationSource;
use crate::splat::{refine, RefineReport};
use crate::types::{Config, GaussianMap, Prediction, RigidPose, Trajectory};

#[derive(Debug, Clone)]
pub struct BufferEntry {
    pub frame_id: u64,
    /// Latest map-frame prediction of the frame.
    pub prediction: Prediction,
    /// False while the pose is only chained, not yet fused.
    pub integrated: bool,
}

/// FIFO of recent frames with strictly increasing ids.
#[derive(Debug, Clone)]
pub struct FrameBuffer {
    capacity: usize,
    entries: VecDeque<BufferEntry>,
}

impl FrameBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends a frame and evicts the oldest ones beyond capacity.
    pub fn push(&mut self, entry: BufferEntry) -> Result<Vec<BufferEntry>> {
        if let Some(last) = self.entries.back() {
            if entry.frame_id <= last.frame_id {
                return Err(Error::InvalidInput(format!(
                    "buffer frame {} does not follow {}",
                    entry.frame_id, last.frame_id
                )));
            }
        }
        self.entries.push_back(entry);
        let mut evicted = Vec::new();
        while self.entries.len() > self.capacity {
            evicted.extend(self.entries.pop_front());
        }
        Ok(evicted)
    }

    pub fn frame_ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.frame_id).collect()
    }

    pub fn get(&self, frame_id: u64) -> Option<&BufferEntry> {
        self.entries.iter().find(|e| e.frame_id == frame_id)
    }

    pub fn get_mut(&mut self, frame_id: u64) -> Option<&mut BufferEntry> {
        self.entries.iter_mut().find(|e| e.frame_id == frame_id)
    }

    pub fn remove(&mut self, frame_id: u64) -> Option<BufferEntry> {
        let i = self.entries.iter().position(|e| e.frame_id == frame_id)?;
        self.entries.remove(i)
    }

    pub fn newest(&self) -> Option<&BufferEntry> {
        self.entries.back()
    }

    /// Newest frame whose prediction has been fused into the map.
    pub fn newest_integrated(&self) -> Option<&BufferEntry> {
        self.entries.iter().rev().find(|e| e.integrated)
    }

    pub fn entries(&self) -> impl Iterator<Item = &BufferEntry> {
        self.entries.iter()
    }
}

/// Frames to infer and the pose hints that go with them.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSet {
    pub frames: Vec<u64>,
    pub pose_hints: Vec<(u64, RigidPose)>,
}

/// Buffer frames, then `current`, then the anchor, without repeats. Only
/// the anchor pose is hinted.
pub fn build_input_set(buffer: &FrameBuffer, current: u64, anchor: (u64, RigidPose)) -> InputSet {
    let mut frames = buffer.frame_ids();
    for f in [current, anchor.0] {
        if !frames.contains(&f) {
            frames.push(f);
        }
    }
    InputSet {
        frames,
        pose_hints: vec![anchor],
    }
}

/// What happened to one processed frame.
#[derive(Debug, Clone, PartialEq)]
pub enum FrameOutcome {
    /// Part of the initial map.
    Initialized,
    Integrated {
        em_points: usize,
        em_updated: usize,
        unexplained: usize,
        refine: RefineReport,
        coarse_residual: f64,
    },
    /// Localization or fusion failed; the frame has no pose.
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameLog {
    pub frame_id: u64,
    pub outcome: FrameOutcome,
    /// Map size after the frame.
    pub map_size: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub map: GaussianMap,
    /// Finalized poses only.
    pub trajectory: Trajectory,
    pub frames: Vec<FrameLog>,
    /// Number of source queries made.
    pub queries: usize,
}

impl RunOutput {
    pub fn skipped(&self) -> Vec<u64> {
        self.frames
            .iter()
            .filter(|f| matches!(f.outcome, FrameOutcome::Skipped { .. }))
            .map(|f| f.frame_id)
            .collect()
    }

    pub fn refine_reports(&self) -> impl Iterator<Item = (u64, &RefineReport)> {
        self.frames.iter().filter_map(|f| match &f.outcome {
            FrameOutcome::Integrated { refine, .. } => Some((f.frame_id, refine)),
            _ => None,
        })
    }
}

/// Processed frame ids of a source.
pub fn processed_frames(len: usize, stride: usize) -> Vec<u64> {
    (0..len as u64).step_by(stride.max(1)).collect()
}

fn infer_indexed(
    source: &mut dyn ObservationSource,
    input: &InputSet,
) -> Result<Vec<Prediction>> {
    let preds = source.infer(&input.frames, &input.pose_hints)?;
    if preds.len() != input.frames.len() {
        return Err(Error::Source(format!(
            "requested {} frames, got {} predictions",
            input.frames.len(),
            preds.len()
        )));
    }
    for (p, &f) in preds.iter().zip(&input.frames) {
        if p.frame_id != f {
            return Err(Error::Source(format!("requested frame {f}, got frame {}", p.frame_id)));
        }
        p.check_shape()?;
    }
    Ok(preds)
}

fn find(preds: &[Prediction], frame: u64) -> &Prediction {
    preds.iter().find(|p| p.frame_id == frame).expect("frame was requested")
}

struct Fused {
    aligned: Prediction,
    world_from_prediction: RigidPose,
    outcome: FrameOutcome,
}

/// Localizes `target` from `preds` through the newest integrated buffer
/// frame and fuses it.
fn fuse(map: &mut GaussianMap, buffer: &FrameBuffer, preds: &[Prediction], target: u64, config: &Config) -> Result<Fused> {
    let shared = buffer
        .newest_integrated()
        .ok_or_else(|| Error::Registration("no integrated frame left in the buffer".into()))?;
    let o_new = find(preds, target);
    let o_shared_new = find(preds, shared.frame_id);
    let loc = localize(o_new, o_shared_new, &shared.prediction, map, config)?;
    let subset = loc.submap.gaussian_indices.clone();
    let em = integrate(map, &loc.aligned, Some(&subset), config)?;
    let refine = refine(map, &loc.aligned, &em.unexplained, Some(&subset), config)?;
    Ok(Fused {
        outcome: FrameOutcome::Integrated {
            em_points: em.report.integrated,
            em_updated: em.report.updated.len(),
            unexplained: em.unexplained.len(),
            refine,
            coarse_residual: loc.coarse.residual_rms,
        },
        world_from_prediction: loc.world_from_prediction,
        aligned: loc.aligned,
    })
}

/// Runs the whole sequence. The anchor is the first processed frame and its
/// pose `anchor_pose` defines the map frame.
pub fn run_with_anchor(
    source: &mut dyn ObservationSource,
    config: &Config,
    anchor_pose: RigidPose,
) -> Result<RunOutput> {
    config.validate()?;
    if source.feature_dim() != config.feature_dim {
        return Err(Error::InvalidInput(format!(
            "source features have {} dimensions, config expects {}",
            source.feature_dim(),
            config.feature_dim
        )));
    }
    let frames = processed_frames(source.len(), config.frame_stride);
    if frames.is_empty() {
        return Err(Error::Source("source yields no frames".into()));
    }
    let anchor = (frames[0], anchor_pose);
    let n_init = config.buffer_size.min(frames.len());
    let mut buffer = FrameBuffer::new(config.buffer_size);
    let mut trajectory = Trajectory::new();
    let mut logs = Vec::new();
    let mut queries = 0;

    let init = InputSet {
        frames: frames[..n_init].to_vec(),
        pose_hints: vec![anchor],
    };
    let preds = infer_indexed(source, &init)?;
    queries += 1;
    let mut map = initialize_map(&preds, config)?;
    for p in preds {
        trajectory.push(p.frame_id, p.pose, source.timestamp(p.frame_id))?;
        logs.push(FrameLog {
            frame_id: p.frame_id,
            outcome: FrameOutcome::Initialized,
            map_size: map.len(),
        });
        buffer.push(BufferEntry {
            frame_id: p.frame_id,
            prediction: p,
            integrated: true,
        })?;
    }
    log::info!("initialized {} Gaussians from {n_init} frames", map.len());

    let mut last_preds: Option<Vec<Prediction>> = None;
    for &current in &frames[n_init..] {
        let input = build_input_set(&buffer, current, anchor);
        let preds = match infer_indexed(source, &input) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("frame {current}: inference failed, stopping: {e}");
                break;
            }
        };
        queries += 1;

        // the previous frame, if still provisional, is integrated now
        let mut world_from_prediction = None;
        if let Some(pending) = buffer.newest().filter(|e| !e.integrated).map(|e| e.frame_id) {
            match fuse(&mut map, &buffer, &preds, pending, config) {
                Ok(f) => {
                    trajectory.push(pending, f.aligned.pose, source.timestamp(pending))?;
                    world_from_prediction = Some(f.world_from_prediction);
                    let entry = buffer.get_mut(pending).expect("pending frame is buffered");
                    entry.prediction = f.aligned;
                    entry.integrated = true;
                    logs.push(FrameLog {
                        frame_id: pending,
                        outcome: f.outcome,
                        map_size: map.len(),
                    });
                }
                Err(e) => {
                    log::warn!("frame {pending}: skipped: {e}");
                    buffer.remove(pending);
                    logs.push(FrameLog {
                        frame_id: pending,
                        outcome: FrameOutcome::Skipped { reason: e.to_string() },
                        map_size: map.len(),
                    });
                }
            }
        }

        // provisional pose of the current frame through the newest fused one
        let reference = buffer
            .newest_integrated()
            .ok_or_else(|| Error::Registration("lost track: no integrated frame in the buffer".into()))?;
        let t = world_from_prediction.unwrap_or_else(|| {
            reference
                .prediction
                .pose
                .compose(&find(&preds, reference.frame_id).pose.inverse())
        });
        buffer.push(BufferEntry {
            frame_id: current,
            prediction: find(&preds, current).transformed(&t),
            integrated: false,
        })?;
        last_preds = Some(preds);
    }

    // flush: the newest frame is integrated from the last request
    if let (Some(preds), Some(pending)) = (
        last_preds,
        buffer.newest().filter(|e| !e.integrated).map(|e| e.frame_id),
    ) {
        match fuse(&mut map, &buffer, &preds, pending, config) {
            Ok(f) => {
                trajectory.push(pending, f.aligned.pose, source.timestamp(pending))?;
                logs.push(FrameLog {
                    frame_id: pending,
                    outcome: f.outcome,
                    map_size: map.len(),
                });
            }
            Err(e) => {
                log::warn!("frame {pending}: skipped: {e}");
                logs.push(FrameLog {
                    frame_id: pending,
                    outcome: FrameOutcome::Skipped { reason: e.to_string() },
                    map_size: map.len(),
                });
            }
        }
    }

    Ok(RunOutput {
        map,
        trajectory,
        frames: logs,
        queries,
    })
}

/// [`run_with_anchor`] with the anchor at the identity.
pub fn run(source: &mut dyn ObservationSource, config: &Config) -> Result<RunOutput> {
    run_with_anchor(source, config, RigidPose::identity())
}

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;

    use super::*;
    use crate::types::CameraIntrinsics;

    fn dummy(frame_id: u64) -> BufferEntry {
        let k = CameraIntrinsics::from_fov(2, 2, 60.0).unwrap();
        BufferEntry {
            frame_id,
            prediction: Prediction {
                frame_id,
                points: vec![Vector3::zeros(); 4],
                valid: vec![false; 4],
                colors: vec![Vector3::zeros(); 4],
                normals: vec![Vector3::zeros(); 4],
                features: vec![0.0; 4],
                feature_dim: 1,
                pose: RigidPose::identity(),
                intrinsics: k,
            },
            integrated: true,
        }
    }

    #[test]
    fn full_buffer_gives_twelve_frames_and_one_hint() {
        let mut b = FrameBuffer::new(10);
        for f in 1..=10 {
            b.push(dummy(f * 10)).unwrap();
        }
        let anchor = (0, RigidPose::identity());
        let s = build_input_set(&b, 110, anchor);
        assert_eq!(s.frames.len(), 12);
        assert_eq!(s.frames[10], 110);
        assert_eq!(s.frames[11], 0);
        assert_eq!(s.pose_hints, vec![anchor]);
    }

    #[test]
    fn empty_buffer_gives_current_and_anchor() {
        let b = FrameBuffer::new(10);
        let s = build_input_set(&b, 7, (0, RigidPose::identity()));
        assert_eq!(s.frames, vec![7, 0]);
        assert_eq!(s.pose_hints.len(), 1);
    }

    #[test]
    fn current_equal_to_anchor_is_one_frame() {
        let b = FrameBuffer::new(10);
        let s = build_input_set(&b, 0, (0, RigidPose::identity()));
        assert_eq!(s.frames, vec![0]);
        assert_eq!(s.pose_hints.len(), 1);
    }

    #[test]
    fn buffer_evicts_oldest_and_keeps_order() {
        let mut b = FrameBuffer::new(3);
        for f in 0..5 {
            b.push(dummy(f)).unwrap();
            assert!(b.len() <= 3);
        }
        assert_eq!(b.frame_ids(), vec![2, 3, 4]);
        assert!(b.push(dummy(4)).is_err());
        b.get_mut(4).unwrap().integrated = false;
        assert_eq!(b.newest_integrated().unwrap().frame_id, 3);
    }

    #[test]
    fn stride_selects_every_tenth() {
        assert_eq!(processed_frames(25, 10), vec![0, 10, 20]);
        assert_eq!(processed_frames(3, 1), vec![0, 1, 2]);
    }
}
