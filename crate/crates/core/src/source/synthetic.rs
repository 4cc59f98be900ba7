//! Synthetic stand-in for a feed-forward geometry model.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Unit, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::noise::{gauss, random_unit, NoiseModel, SmoothField};
use super::scene::{ground_truth, SceneSpec, SurfaceSamples, SyntheticScene};
use super::ObservationSource;
use crate::error::{Error, Result};
use crate::types::{CameraIntrinsics, Prediction, RigidPose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            hfov_deg: 70.0,
        }
    }
}

impl CameraSpec {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::from_fov(self.width, self.height, self.hfov_deg)
    }
}

/// Camera circling a target on a horizontal arc (z up), with an optional
/// vertical bob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitSpec {
    pub center: [f64; 3],
    pub radius: f64,
    /// Camera height above `center`.
    pub height: f64,
    pub target: [f64; 3],
    pub frames: usize,
    pub start_deg: f64,
    pub sweep_deg: f64,
    /// Amplitude of a vertical oscillation over the sweep (m).
    pub bob: f64,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        Self {
            center: [0.0, 0.0, 0.0],
            radius: 1.0,
            height: 1.0,
            target: [0.0, 0.0, 0.3],
            frames: 300,
            start_deg: 0.0,
            sweep_deg: 120.0,
            bob: 0.0,
        }
    }
}

impl OrbitSpec {
    pub fn poses(&self) -> Vec<RigidPose> {
        let c = Vector3::from(self.center);
        let target = Vector3::from(self.target);
        let n = self.frames;
        (0..n)
            .map(|i| {
                let f = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                let a = (self.start_deg + f * self.sweep_deg).to_radians();
                let bob = self.bob * (f * std::f64::consts::TAU).sin();
                let out = Vector3::new(a.cos(), a.sin(), 0.0);
                let eye = c + self.radius * out + Vector3::new(0.0, 0.0, self.height + bob);
                RigidPose::look_at(&eye, &target, &Vector3::z())
            })
            .collect()
    }
}

/// A complete synthetic sequence description, as stored in scene files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub scene: SceneSpec,
    #[serde(default)]
    pub camera: CameraSpec,
    #[serde(default)]
    pub trajectory: OrbitSpec,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: f64,
    /// Ground-truth sampling spacing for evaluation (m).
    #[serde(default = "default_gt_spacing")]
    pub gt_spacing: f64,
}

fn default_frame_rate() -> f64 {
    30.0
}

fn default_gt_spacing() -> f64 {
    0.02
}

impl SyntheticSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Clean per-frame ray-cast, computed once per frame id.
#[derive(Debug)]
struct CleanFrame {
    valid: Vec<bool>,
    /// Camera-frame points.
    points: Vec<Vector3<f64>>,
    /// World-frame normals facing the camera.
    normals: Vec<Vector3<f64>>,
    colors: Vec<Vector3<f64>>,
    classes: Vec<usize>,
}

/// Mixes two words into a seed.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const WARP_STREAM: u64 = 0x5741_5250;
const SCALE_STREAM: u64 = 0x5343_414c;

pub struct SyntheticSource {
    scene: Arc<SyntheticScene>,
    poses: Vec<RigidPose>,
    intrinsics: CameraIntrinsics,
    noise: NoiseModel,
    frame_rate: f64,
    seed: u64,
    calls: u64,
    cache: HashMap<u64, Arc<CleanFrame>>,
}

impl SyntheticSource {
    pub fn new(
        scene: SyntheticScene,
        poses: Vec<RigidPose>,
        intrinsics: CameraIntrinsics,
        noise: NoiseModel,
        seed: u64,
    ) -> Result<Self> {
        scene.validate()?;
        noise.validate()?;
        intrinsics.validate()?;
        Ok(Self {
            scene: Arc::new(scene),
            poses,
            intrinsics,
            noise,
            frame_rate: default_frame_rate(),
            seed,
            calls: 0,
            cache: HashMap::new(),
        })
    }

    pub fn from_spec(spec: &SyntheticSpec, seed: u64) -> Result<Self> {
        let scene = SyntheticScene::from_spec(&spec.scene)?;
        let mut s = Self::new(
            scene,
            spec.trajectory.poses(),
            spec.camera.intrinsics()?,
            spec.noise.clone(),
            seed,
        )?;
        if !(spec.frame_rate > 0.0) {
            return Err(Error::InvalidInput("frame_rate must be positive".into()));
        }
        s.frame_rate = spec.frame_rate;
        Ok(s)
    }

    pub fn scene(&self) -> &SyntheticScene {
        &self.scene
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn set_noise(&mut self, noise: NoiseModel) -> Result<()> {
        noise.validate()?;
        self.noise = noise;
        Ok(())
    }

    /// Exact camera-to-world poses.
    pub fn gt_poses(&self) -> &[RigidPose] {
        &self.poses
    }

    pub fn gt_pose(&self, frame: u64) -> Option<&RigidPose> {
        self.poses.get(frame as usize)
    }

    /// Visible surface samples for the given frames.
    pub fn ground_truth(&self, frames: &[u64], spacing: f64) -> (SurfaceSamples, Vec<RigidPose>) {
        let poses: Vec<RigidPose> = frames.iter().filter_map(|&f| self.gt_pose(f).copied()).collect();
        ground_truth(&self.scene, &poses, &self.intrinsics, spacing)
    }

    fn clean(&mut self, frame: u64) -> Arc<CleanFrame> {
        if let Some(c) = self.cache.get(&frame) {
            return c.clone();
        }
        let pose = self.poses[frame as usize];
        let k = self.intrinsics;
        let n = k.pixel_count();
        let mut f = CleanFrame {
            valid: vec![false; n],
            points: vec![Vector3::zeros(); n],
            normals: vec![Vector3::zeros(); n],
            colors: vec![Vector3::zeros(); n],
            classes: vec![0; n],
        };
        let origin = *pose.translation();
        for v in 0..k.height {
            for u in 0..k.width {
                let i = v * k.width + u;
                let ray_c = k.ray(u as f64, v as f64);
                let dir = pose.transform_vector(&ray_c);
                let Some(hit) = self.scene.cast(&origin, &dir) else {
                    continue;
                };
                let patch = &self.scene.patches[hit.patch];
                let mut normal = patch.normal;
                if normal.dot(&dir) > 0.0 {
                    normal = -normal;
                }
                // parameter along a z = 1 ray is the z-depth
                let z = hit.distance / dir.norm();
                f.valid[i] = true;
                f.points[i] = ray_c * z;
                f.normals[i] = normal;
                f.colors[i] = self.scene.shade(hit.patch, &hit.point);
                f.classes[i] = patch.class;
            }
        }
        let f = Arc::new(f);
        self.cache.insert(frame, f.clone());
        f
    }

    fn check_frame(&self, frame: u64) -> Result<()> {
        if (frame as usize) < self.poses.len() {
            Ok(())
        } else {
            Err(Error::Source(format!(
                "frame {frame} is outside the synthetic sequence of {} frames",
                self.poses.len()
            )))
        }
    }
}

/// Rigid perturbation about a point: `x ↦ R(x − c) + c + t`.
fn perturbation<R: Rng>(rng: &mut R, noise: &NoiseModel, center: &Vector3<f64>) -> RigidPose {
    if noise.pose_sigma_rot_deg == 0.0 && noise.pose_sigma_t == 0.0 {
        return RigidPose::identity();
    }
    let axis = random_unit(rng);
    let angle = noise.pose_sigma_rot_deg.to_radians() * gauss(rng);
    let t = Vector3::from_fn(|_, _| noise.pose_sigma_t * gauss(rng));
    let rot = RigidPose::from_axis_angle(&axis, angle, Vector3::zeros());
    let shift = center - rot.transform_vector(center) + t;
    RigidPose::new(*rot.rotation(), shift).expect("rotation from axis-angle")
}

fn tilt<R: Rng>(rng: &mut R, n: &Vector3<f64>, sigma_deg: f64) -> Vector3<f64> {
    if sigma_deg == 0.0 {
        return *n;
    }
    let axis = random_unit(rng).cross(n);
    if axis.norm() < 1e-9 {
        return *n;
    }
    let angle = sigma_deg.to_radians() * gauss(rng);
    (UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), angle) * n).normalize()
}

impl ObservationSource for SyntheticSource {
    fn len(&self) -> usize {
        self.poses.len()
    }

    fn timestamp(&self, frame: u64) -> f64 {
        frame as f64 / self.frame_rate
    }

    fn intrinsics(&self) -> CameraIntrinsics {
        self.intrinsics
    }

    fn feature_dim(&self) -> usize {
        self.scene.feature_dim()
    }

    fn infer(&mut self, frames: &[u64], pose_hints: &[(u64, RigidPose)]) -> Result<Vec<Prediction>> {
        for &f in frames.iter().chain(pose_hints.iter().map(|(f, _)| f)) {
            self.check_frame(f)?;
        }
        // prediction frame: the first hinted frame sits exactly at its hint
        let (anchor, world_from_gt) = match pose_hints.first() {
            Some((a, hint)) => (Some(*a), hint.compose(&self.poses[*a as usize].inverse())),
            None => (None, RigidPose::identity()),
        };
        let mut call_rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, self.calls));
        self.calls += 1;
        let noise = self.noise.clone();
        let d = self.feature_dim();
        let k = self.intrinsics;

        let mut out = Vec::with_capacity(frames.len());
        for &frame in frames {
            let clean = self.clean(frame);
            let gt = self.poses[frame as usize];
            let mut rng = ChaCha8Rng::seed_from_u64(call_rng.random());
            let mut warp_rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed ^ WARP_STREAM, frame));
            let warp = SmoothField::random(&mut warp_rng, noise.warp_amplitude, noise.field_wavelength);
            let jitter = SmoothField::random(&mut rng, noise.jitter_sigma, noise.field_wavelength);
            let perturb = if Some(frame) == anchor {
                RigidPose::identity()
            } else {
                perturbation(&mut rng, &noise, gt.translation())
            };
            let to_pred = world_from_gt.compose(&perturb);
            let mut scale_rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed ^ SCALE_STREAM, frame));
            let scale = noise.draw_scale(&mut scale_rng);

            let n = k.pixel_count();
            let mut points = vec![Vector3::zeros(); n];
            let mut normals = vec![Vector3::zeros(); n];
            let mut features = vec![0.0; n * d];
            for i in 0..n {
                if !clean.valid[i] {
                    continue;
                }
                let pc = clean.points[i];
                let z = pc.z;
                let sigma = noise.depth_sigma + noise.depth_sigma_rel * z;
                let z_noisy = if sigma > 0.0 {
                    z + sigma * gauss(&mut rng)
                } else {
                    z
                };
                let pw_clean = gt.transform_point(&pc);
                let pw = gt.transform_point(&(pc * (scale * z_noisy / z))) + warp.at(&pw_clean) + jitter.at(&pw_clean);
                points[i] = to_pred.transform_point(&pw);
                let nw = tilt(&mut rng, &clean.normals[i], noise.normal_sigma_deg);
                normals[i] = to_pred.transform_vector(&nw);

                let class = &self.scene.class_features[clean.classes[i]];
                let feat = &mut features[i * d..(i + 1) * d];
                if noise.feature_sigma > 0.0 {
                    for (o, c) in feat.iter_mut().zip(class) {
                        *o = c + noise.feature_sigma * gauss(&mut rng);
                    }
                    let norm = feat.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 1e-12 {
                        feat.iter_mut().for_each(|x| *x /= norm);
                    } else {
                        feat.copy_from_slice(class);
                    }
                } else {
                    feat.copy_from_slice(class);
                }
            }
            let pose = to_pred.compose(&gt);
            out.push(Prediction {
                frame_id: frame,
                points,
                valid: clean.valid.clone(),
                colors: clean.colors.clone(),
                normals,
                features,
                feature_dim: d,
                pose,
                intrinsics: k,
            });
        }
        Ok(out)
    }
}
