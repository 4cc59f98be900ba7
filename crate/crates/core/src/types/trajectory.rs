use super::RigidPose;
use crate::error::{Error, Result};

/// One camera-to-world pose per frame, ordered by frame id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub frame_id: u64,
    pub pose: RigidPose,
    pub timestamp: f64,
}

/// Frame poses with strictly increasing frame ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<TrajectoryEntry>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<TrajectoryEntry>) -> Result<Self> {
        let mut t = Self::new();
        for e in entries {
            t.push(e.frame_id, e.pose, e.timestamp)?;
        }
        Ok(t)
    }

    /// Appends a pose; ids must keep increasing.
    pub fn push(&mut self, frame_id: u64, pose: RigidPose, timestamp: f64) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if frame_id <= last.frame_id {
                return Err(Error::InvalidInput(format!(
                    "trajectory frame id {frame_id} does not follow {}",
                    last.frame_id
                )));
            }
        }
        self.entries.push(TrajectoryEntry {
            frame_id,
            pose,
            timestamp,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[TrajectoryEntry] {
        &self.entries
    }

    pub fn get(&self, frame_id: u64) -> Option<&TrajectoryEntry> {
        self.entries
            .binary_search_by_key(&frame_id, |e| e.frame_id)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn frame_ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.frame_id).collect()
    }
}
