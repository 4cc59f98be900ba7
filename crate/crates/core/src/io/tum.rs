//! TUM RGB-D trajectory text files: `timestamp tx ty tz qx qy qz qw`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::types::{RigidPose, Trajectory, TrajectoryEntry};

/// Timestamps closer than this are the same frame when matching files.
pub const TIMESTAMP_TOLERANCE: f64 = 1e-4;

pub fn format_tum(trajectory: &Trajectory) -> String {
    let mut out = String::new();
    for e in trajectory.entries() {
        let t = e.pose.translation();
        let q = e.pose.quaternion();
        let q = q.as_ref();
        writeln!(
            out,
            "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            e.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )
        .unwrap();
    }
    out
}

pub fn write_tum(trajectory: &Trajectory, path: &Path) -> Result<()> {
    std::fs::write(path, format_tum(trajectory)).map_err(|e| Error::io(path, e))
}

/// Parses TUM lines. Entries get frame ids `0, 1, 2, …` in file order;
/// lines starting with `#` and blank lines are skipped.
pub fn parse_tum(text: &str) -> Result<Trajectory> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::format(format!("TUM line {}", lineno + 1), msg);
        let vals = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("`{s}` is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 8 {
            return Err(bad(format!("expected 8 values, found {}", vals.len())));
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if !(q.norm() > 1e-9) {
            return Err(bad("degenerate quaternion".into()));
        }
        if let Some(prev) = entries.last().map(|e: &TrajectoryEntry| e.timestamp) {
            if vals[0] <= prev {
                return Err(bad(format!("timestamp {} does not increase", vals[0])));
            }
        }
        entries.push(TrajectoryEntry {
            frame_id: entries.len() as u64,
            pose: RigidPose::from_quaternion(
                UnitQuaternion::from_quaternion(q),
                Vector3::new(vals[1], vals[2], vals[3]),
            ),
            timestamp: vals[0],
        });
    }
    Trajectory::from_entries(entries)
}

pub fn read_tum(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tum(&text).map_err(|e| match e {
        Error::Format { context, message } => Error::Format {
            context: format!("{}: {context}", path.display()),
            message,
        },
        other => other,
    })
}

/// Renumbers `estimated` so each entry carries the frame id of the
/// `reference` entry with the same timestamp. Fails on the first estimated
/// timestamp that has no counterpart.
pub fn match_timestamps(estimated: &Trajectory, reference: &Trajectory) -> Result<Trajectory> {
    let refs = reference.entries();
    let mut out = Trajectory::new();
    for (n, e) in estimated.entries().iter().enumerate() {
        let i = refs.partition_point(|r| r.timestamp < e.timestamp - TIMESTAMP_TOLERANCE);
        match refs.get(i) {
            Some(r) if (r.timestamp - e.timestamp).abs() <= TIMESTAMP_TOLERANCE => {
                out.push(r.frame_id, e.pose, e.timestamp)?;
            }
            _ => {
                return Err(Error::TrajectoryMismatch(format!(
                    "estimated pose {n} (timestamp {:.6}) has no ground-truth counterpart",
                    e.timestamp
                )))
            }
        }
    }
    Ok(out)
}
