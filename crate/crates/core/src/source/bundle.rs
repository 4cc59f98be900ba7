//! Precomputed predictions stored as one directory per frame.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::ObservationSource;
use crate::error::{Error, Result};
use crate::io::ply::{ScalarType, VertexTable};
use crate::types::{CameraIntrinsics, Prediction, RigidPose};

/// Tolerance on the orthonormality of stored pose rotations.
pub const POSE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BundleIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// `meta.json` of a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub frame_id: u64,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "D")]
    pub feature_dim: usize,
    pub intrinsics: BundleIntrinsics,
    /// Camera-to-world, 4×4 row-major.
    pub pose: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

impl BundleMeta {
    pub fn camera(&self) -> Result<CameraIntrinsics> {
        let k = &self.intrinsics;
        CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, self.width, self.height)
    }
}

/// Writes `points.ply` and `meta.json` for one prediction into `dir`.
pub fn write_bundle(dir: &Path, pred: &Prediction, timestamp: Option<f64>) -> Result<()> {
    pred.check_shape()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut t = VertexTable::new();
    let comp = |f: &dyn Fn(usize) -> f64| (0..pred.pixel_count()).map(f).collect::<Vec<f64>>();
    let valid = |i: usize| pred.valid[i];
    t.push_column("x", ScalarType::F32, comp(&|i| pred.points[i].x));
    t.push_column("y", ScalarType::F32, comp(&|i| pred.points[i].y));
    t.push_column("z", ScalarType::F32, comp(&|i| pred.points[i].z));
    t.push_column("nx", ScalarType::F32, comp(&|i| pred.normals[i].x));
    t.push_column("ny", ScalarType::F32, comp(&|i| pred.normals[i].y));
    t.push_column("nz", ScalarType::F32, comp(&|i| pred.normals[i].z));
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round();
    t.push_column("red", ScalarType::U8, comp(&|i| byte(pred.colors[i].x)));
    t.push_column("green", ScalarType::U8, comp(&|i| byte(pred.colors[i].y)));
    t.push_column("blue", ScalarType::U8, comp(&|i| byte(pred.colors[i].z)));
    for f in 0..pred.feature_dim {
        t.push_column(format!("f_{f}"), ScalarType::F32, comp(&|i| pred.feature(i)[f]));
    }
    t.push_column("valid", ScalarType::U8, comp(&|i| if valid(i) { 1.0 } else { 0.0 }));
    t.save(&dir.join("points.ply"))?;

    let k = &pred.intrinsics;
    let meta = BundleMeta {
        frame_id: pred.frame_id,
        height: k.height,
        width: k.width,
        feature_dim: pred.feature_dim,
        intrinsics: BundleIntrinsics {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
        },
        pose: pred.pose.to_row_major().to_vec(),
        timestamp,
    };
    let path = dir.join("meta.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

fn read_meta(dir: &Path) -> Result<BundleMeta> {
    let path = dir.join("meta.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

/// Directory of `frame_*` bundles, ordered by name. Frame `i` of the
/// source is the `i`-th bundle.
#[derive(Debug, Clone)]
pub struct BundleSource {
    dirs: Vec<PathBuf>,
    metas: Vec<BundleMeta>,
    intrinsics: CameraIntrinsics,
    feature_dim: usize,
}

impl BundleSource {
    pub fn open(root: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_dir()
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("frame_"))
            })
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::Source(format!("no frame_* bundles under {}", root.display())));
        }
        let metas = dirs.iter().map(|d| read_meta(d)).collect::<Result<Vec<_>>>()?;
        let intrinsics = metas[0].camera()?;
        let feature_dim = metas[0].feature_dim;
        for (d, m) in dirs.iter().zip(&metas) {
            if m.camera()? != intrinsics || m.feature_dim != feature_dim {
                return Err(Error::Source(format!(
                    "frame {} ({}): image shape or intrinsics differ from the first bundle",
                    m.frame_id,
                    d.display()
                )));
            }
        }
        Ok(Self {
            dirs,
            metas,
            intrinsics,
            feature_dim,
        })
    }

    pub fn meta(&self, frame: u64) -> Option<&BundleMeta> {
        self.metas.get(frame as usize)
    }

    fn load(&self, frame: u64) -> Result<Prediction> {
        let i = frame as usize;
        let (dir, meta) = match (self.dirs.get(i), self.metas.get(i)) {
            (Some(d), Some(m)) => (d, m),
            _ => {
                return Err(Error::Source(format!(
                    "frame {frame}: no bundle (sequence has {} frames)",
                    self.dirs.len()
                )))
            }
        };
        let named = |e: Error| Error::Source(format!("frame {} ({}): {e}", meta.frame_id, dir.display()));
        let table = VertexTable::load(&dir.join("points.ply")).map_err(named)?;
        let n = meta.width * meta.height;
        if table.len() != n {
            return Err(named(Error::InvalidInput(format!(
                "points.ply has {} vertices, expected {}×{} = {n}",
                table.len(),
                meta.height,
                meta.width
            ))));
        }
        let col = |name: &str| table.require(name).map_err(named);
        let v3 = |a: &[f64], b: &[f64], c: &[f64]| -> Vec<Vector3<f64>> {
            (0..n).map(|i| Vector3::new(a[i], b[i], c[i])).collect()
        };
        let points = v3(col("x")?, col("y")?, col("z")?);
        // stored at single precision, so unit vectors are renormalized
        let normals: Vec<Vector3<f64>> = v3(col("nx")?, col("ny")?, col("nz")?)
            .into_iter()
            .map(|v| v.try_normalize(0.0).unwrap_or(v))
            .collect();
        let colors: Vec<Vector3<f64>> = v3(col("red")?, col("green")?, col("blue")?)
            .into_iter()
            .map(|c| c / 255.0)
            .collect();
        let valid: Vec<bool> = col("valid")?.iter().map(|&v| v != 0.0).collect();
        let d = meta.feature_dim;
        let fcols = (0..d).map(|f| col(&format!("f_{f}"))).collect::<Result<Vec<_>>>()?;
        let mut features = vec![0.0; n * d];
        for i in 0..n {
            for (f, c) in fcols.iter().enumerate() {
                features[i * d + f] = c[i];
            }
            let block = &mut features[i * d..(i + 1) * d];
            let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                block.iter_mut().for_each(|v| *v /= norm);
            }
        }
        if meta.pose.len() != 16 {
            return Err(named(Error::InvalidInput(format!(
                "pose has {} entries, expected 16",
                meta.pose.len()
            ))));
        }
        let pose = RigidPose::from_row_major(&meta.pose, POSE_TOLERANCE).map_err(named)?;
        let pred = Prediction {
            frame_id: frame,
            points,
            valid,
            colors,
            normals,
            features,
            feature_dim: d,
            pose,
            intrinsics: meta.camera().map_err(named)?,
        };
        pred.check_shape().map_err(named)?;
        Ok(pred)
    }
}

impl ObservationSource for BundleSource {
    fn len(&self) -> usize {
        self.dirs.len()
    }

    fn timestamp(&self, frame: u64) -> f64 {
        self.meta(frame)
            .and_then(|m| m.timestamp)
            .unwrap_or(frame as f64 / 30.0)
    }

    fn intrinsics(&self) -> CameraIntrinsics {
        self.intrinsics
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Stored predictions, moved rigidly so the hinted frame sits at its hint.
    fn infer(&mut self, frames: &[u64], pose_hints: &[(u64, RigidPose)]) -> Result<Vec<Prediction>> {
        let preds = frames.iter().map(|&f| self.load(f)).collect::<Result<Vec<_>>>()?;
        let Some((anchor, hint)) = pose_hints.first() else {
            return Ok(preds);
        };
        let anchor_pose = match preds.iter().find(|p| p.frame_id == *anchor) {
            Some(p) => p.pose,
            None => self.load(*anchor)?.pose,
        };
        let t = hint.compose(&anchor_pose.inverse());
        Ok(preds.iter().map(|p| p.transformed(&t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::{NoiseModel, SyntheticSource};
    use crate::source::{random_class_features, Patch, SyntheticScene, Texture};

    fn synthetic() -> SyntheticSource {
        let p = Patch::new(
            Vector3::new(-3.0, -3.0, 2.0),
            Vector3::new(6.0, 0.0, 0.0),
            Vector3::new(0.0, 6.0, 0.0),
            Texture::flat([0.4, 0.6, 0.8]),
            0,
        )
        .unwrap();
        let scene = SyntheticScene::new(vec![p], vec!["plane".into()], random_class_features(1, 4, 0)).unwrap();
        let k = CameraIntrinsics::from_fov(32, 24, 60.0).unwrap();
        let poses = vec![
            RigidPose::identity(),
            RigidPose::from_axis_angle(&Vector3::y(), 0.1, Vector3::new(0.2, 0.0, 0.0)),
        ];
        SyntheticSource::new(scene, poses, k, NoiseModel::zero(), 0).unwrap()
    }

    #[test]
    fn written_bundles_load_back() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = synthetic();
        let preds = s.infer(&[0, 1], &[(0, RigidPose::identity())]).unwrap();
        for p in &preds {
            write_bundle(&dir.path().join(format!("frame_{:06}", p.frame_id)), p, Some(p.frame_id as f64)).unwrap();
        }
        let mut b = BundleSource::open(dir.path()).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.timestamp(1), 1.0);
        let back = b.infer(&[1, 0], &[(0, RigidPose::identity())]).unwrap();
        let orig = &preds[1];
        assert_eq!(back[0].valid, orig.valid);
        for (a, c) in back[0].points.iter().zip(&orig.points) {
            assert!((a - c).norm() < 1e-5);
        }
        assert!(back[0].pose.distance_to(&orig.pose) < 1e-6);
        assert!((back[0].colors[0] - Vector3::new(0.4, 0.6, 0.8) * orig.colors[0].x / 0.4).norm() < 0.01);
        // single-precision storage is renormalized on load
        for i in (0..back[0].pixel_count()).filter(|&i| back[0].valid[i]) {
            assert!((back[0].normals[i].norm() - 1.0).abs() < 1e-12);
            let f = back[0].feature(i);
            assert!((f.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hint_moves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = synthetic();
        for p in s.infer(&[0, 1], &[]).unwrap() {
            write_bundle(&dir.path().join(format!("frame_{:06}", p.frame_id)), &p, None).unwrap();
        }
        let mut b = BundleSource::open(dir.path()).unwrap();
        let hint = RigidPose::from_translation(Vector3::new(0.0, 0.0, 5.0));
        let out = b.infer(&[1], &[(0, hint)]).unwrap();
        let plain = b.infer(&[1], &[]).unwrap();
        assert!((out[0].points[0] - plain[0].points[0] - Vector3::new(0.0, 0.0, 5.0)).norm() < 1e-9);
    }

    #[test]
    fn missing_and_misshaped_bundles_name_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = synthetic();
        let preds = s.infer(&[0, 1], &[]).unwrap();
        for p in &preds {
            write_bundle(&dir.path().join(format!("frame_{:06}", p.frame_id)), p, None).unwrap();
        }
        std::fs::remove_file(dir.path().join("frame_000001/points.ply")).unwrap();
        let mut b = BundleSource::open(dir.path()).unwrap();
        let err = b.infer(&[1], &[]).unwrap_err().to_string();
        assert!(err.contains("frame 1"), "{err}");
        assert!(b.infer(&[5], &[]).unwrap_err().to_string().contains("frame 5"));

        // right file, wrong image size
        let meta_path = dir.path().join("frame_000000/meta.json");
        let mut meta: BundleMeta = serde_json::from_str(&std::fs::read_to_string(&meta_path).unwrap()).unwrap();
        meta.height = 12;
        meta.intrinsics.cy = 5.5;
        std::fs::write(&meta_path, serde_json::to_string(&meta).unwrap()).unwrap();
        let err = BundleSource::open(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame 1"), "{err}");
    }
}
