//! Ground-truth scenes made of textured rectangles and boxes.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::types::{CameraIntrinsics, RigidPose};

/// Largest cosine allowed between two class features.
pub const MAX_CLASS_COSINE: f64 = 0.99;

/// Rays farther than this never hit anything (m).
pub const MAX_RANGE: f64 = 50.0;

/// Fixed light direction for flat shading.
pub fn light_direction() -> Vector3<f64> {
    Vector3::new(0.3, 0.5, 1.0).normalize()
}

/// Two-color checkerboard in surface coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub color: [f64; 3],
    #[serde(default)]
    pub alt_color: Option<[f64; 3]>,
    /// Checker cell size (m); ignored without `alt_color`.
    #[serde(default = "default_checker")]
    pub checker: f64,
}

fn default_checker() -> f64 {
    0.25
}

impl Texture {
    pub fn flat(color: [f64; 3]) -> Self {
        Self {
            color,
            alt_color: None,
            checker: default_checker(),
        }
    }

    pub fn at(&self, s: f64, t: f64) -> Vector3<f64> {
        let c = match self.alt_color {
            Some(alt) if self.checker > 0.0 => {
                let parity = ((s / self.checker).floor() + (t / self.checker).floor()) as i64;
                if parity.rem_euclid(2) == 0 {
                    self.color
                } else {
                    alt
                }
            }
            _ => self.color,
        };
        Vector3::from(c)
    }
}

/// Rectangle `origin + s·u + t·v`, `s, t ∈ [0, 1]`, with `u ⟂ v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub origin: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    /// `u × v`, normalized.
    pub normal: Vector3<f64>,
    pub texture: Texture,
    pub class: usize,
}

impl Patch {
    pub fn new(origin: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64>, texture: Texture, class: usize) -> Result<Self> {
        let (lu, lv) = (u.norm(), v.norm());
        if !(lu > 0.0 && lv > 0.0) || u.dot(&v).abs() > 1e-9 * lu * lv {
            return Err(Error::InvalidInput(format!(
                "patch edges must be non-zero and perpendicular: u = {u:?}, v = {v:?}"
            )));
        }
        Ok(Self {
            origin,
            u,
            v,
            normal: u.cross(&v).normalize(),
            texture,
            class,
        })
    }

    /// Ray parameter of the hit, if the ray meets the rectangle in front of
    /// its origin.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let denom = dir.dot(&self.normal);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.origin - origin).dot(&self.normal) / denom;
        if !(t > 0.0) {
            return None;
        }
        let (s, r) = self.coordinates(&(origin + dir * t));
        let eps = 1e-12;
        ((-eps..=1.0 + eps).contains(&s) && (-eps..=1.0 + eps).contains(&r)).then_some(t)
    }

    /// Normalized `(s, t)` of a point on the patch plane.
    pub fn coordinates(&self, p: &Vector3<f64>) -> (f64, f64) {
        let d = p - self.origin;
        (d.dot(&self.u) / self.u.norm_squared(), d.dot(&self.v) / self.v.norm_squared())
    }

    pub fn albedo(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let (s, t) = self.coordinates(p);
        self.texture.at(s * self.u.norm(), t * self.v.norm())
    }

    pub fn area(&self) -> f64 {
        self.u.norm() * self.v.norm()
    }
}

/// A surface as written in scene files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SurfaceSpec {
    Patch {
        origin: [f64; 3],
        u: [f64; 3],
        v: [f64; 3],
        class: String,
        texture: Texture,
    },
    /// Axis-aligned box, expanded into six outward-facing patches.
    Box {
        min: [f64; 3],
        max: [f64; 3],
        class: String,
        texture: Texture,
    },
}

/// Scene file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub classes: Vec<String>,
    pub feature_dim: usize,
    /// Seed for generated class features.
    #[serde(default)]
    pub feature_seed: u64,
    /// Explicit class features; generated when absent.
    #[serde(default)]
    pub class_features: Option<Vec<Vec<f64>>>,
    pub surfaces: Vec<SurfaceSpec>,
}

/// Where a ray first meets the scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub point: Vector3<f64>,
    pub patch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub patches: Vec<Patch>,
    pub class_names: Vec<String>,
    /// Unit class features, one per class.
    pub class_features: Vec<Vec<f64>>,
}

impl SyntheticScene {
    pub fn new(patches: Vec<Patch>, class_names: Vec<String>, class_features: Vec<Vec<f64>>) -> Result<Self> {
        let scene = Self {
            patches,
            class_names,
            class_features,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn empty(feature_dim: usize) -> Self {
        Self {
            patches: Vec::new(),
            class_names: vec!["void".into()],
            class_features: random_class_features(1, feature_dim, 0),
        }
    }

    pub fn from_spec(spec: &SceneSpec) -> Result<Self> {
        let class_of = |name: &str| {
            spec.classes
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::InvalidInput(format!("surface uses unknown class `{name}`")))
        };
        let mut patches = Vec::new();
        for s in &spec.surfaces {
            match s {
                SurfaceSpec::Patch {
                    origin,
                    u,
                    v,
                    class,
                    texture,
                } => patches.push(Patch::new(
                    Vector3::from(*origin),
                    Vector3::from(*u),
                    Vector3::from(*v),
                    *texture,
                    class_of(class)?,
                )?),
                SurfaceSpec::Box {
                    min,
                    max,
                    class,
                    texture,
                } => patches.extend(box_patches(
                    &Vector3::from(*min),
                    &Vector3::from(*max),
                    *texture,
                    class_of(class)?,
                )?),
            }
        }
        let features = match &spec.class_features {
            Some(f) => f.clone(),
            None => random_class_features(spec.classes.len(), spec.feature_dim, spec.feature_seed),
        };
        if features.iter().any(|f| f.len() != spec.feature_dim) {
            return Err(Error::InvalidInput(format!(
                "class features must have {} dimensions",
                spec.feature_dim
            )));
        }
        Self::new(patches, spec.classes.clone(), features)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, SceneSpec)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SceneSpec = serde_json::from_str(&text)?;
        Ok((Self::from_spec(&spec)?, spec))
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_features.len() != self.class_names.len() {
            return Err(Error::InvalidInput(format!(
                "{} class names but {} class features",
                self.class_names.len(),
                self.class_features.len()
            )));
        }
        let d = self.feature_dim();
        for (i, f) in self.class_features.iter().enumerate() {
            let n = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            if f.len() != d || (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!("class feature {i} is not a unit {d}-vector")));
            }
            for (j, g) in self.class_features[..i].iter().enumerate() {
                if cosine(f, g) >= MAX_CLASS_COSINE {
                    return Err(Error::InvalidInput(format!(
                        "class features {j} and {i} are too similar"
                    )));
                }
            }
        }
        if let Some(p) = self.patches.iter().find(|p| p.class >= self.class_names.len()) {
            return Err(Error::InvalidInput(format!("patch class {} out of range", p.class)));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.class_features.first().map_or(0, Vec::len)
    }

    /// Axis-aligned bounds of all surfaces.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let corners: Vec<Vector3<f64>> = self
            .patches
            .iter()
            .flat_map(|p| [p.origin, p.origin + p.u, p.origin + p.v, p.origin + p.u + p.v])
            .collect();
        crate::registration::bounding_box(&corners)
    }

    /// First surface along the ray within `MAX_RANGE`; ties go to the lower
    /// patch index.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.patches.iter().enumerate() {
            if let Some(t) = p.intersect(origin, dir) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        let (t, patch) = best?;
        let distance = t * dir.norm();
        (distance <= MAX_RANGE).then(|| Hit {
            distance,
            point: origin + dir * t,
            patch,
        })
    }

    /// Flat-shaded albedo at a surface point.
    pub fn shade(&self, patch: usize, p: &Vector3<f64>) -> Vector3<f64> {
        let pt = &self.patches[patch];
        let lambert = pt.normal.dot(&light_direction()).abs();
        pt.albedo(p) * (0.7 + 0.3 * lambert)
    }
}

/// Six outward-facing faces of an axis-aligned box.
pub fn box_patches(min: &Vector3<f64>, max: &Vector3<f64>, texture: Texture, class: usize) -> Result<Vec<Patch>> {
    let e = max - min;
    if e.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidInput(format!("degenerate box {min:?}..{max:?}")));
    }
    let (x, y, z) = (
        Vector3::new(e.x, 0.0, 0.0),
        Vector3::new(0.0, e.y, 0.0),
        Vector3::new(0.0, 0.0, e.z),
    );
    let faces = [
        (*min, y, x),
        (min + z, x, y),
        (*min, x, z),
        (min + y, z, x),
        (*min, z, y),
        (min + x, y, z),
    ];
    faces
        .into_iter()
        .map(|(o, u, v)| Patch::new(o, u, v, texture, class))
        .collect()
}

/// Random unit features with pairwise cosine below [`MAX_CLASS_COSINE`].
pub fn random_class_features(classes: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while out.len() < classes {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-12 {
            continue;
        }
        let v: Vec<f64> = v.iter().map(|x| x / n).collect();
        if out.iter().all(|f| cosine(f, &v) < MAX_CLASS_COSINE) {
            out.push(v);
        }
    }
    out
}

/// Ground-truth surface samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfaceSamples {
    pub points: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub labels: Vec<usize>,
}

impl SurfaceSamples {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Regular grid over every patch, edges included: a patch of extent
/// `a × b` yields `(⌊a/spacing⌉ + 1)·(⌊b/spacing⌉ + 1)` samples.
pub fn sample_surfaces(scene: &SyntheticScene, spacing: f64) -> SurfaceSamples {
    let mut out = SurfaceSamples::default();
    for p in &scene.patches {
        let nu = (p.u.norm() / spacing).round().max(1.0) as usize;
        let nv = (p.v.norm() / spacing).round().max(1.0) as usize;
        for j in 0..=nv {
            for i in 0..=nu {
                out.points
                    .push(p.origin + p.u * (i as f64 / nu as f64) + p.v * (j as f64 / nv as f64));
                out.normals.push(p.normal);
                out.labels.push(p.class);
            }
        }
    }
    out
}

/// Whether `p` on patch `patch` is seen unoccluded by a camera.
pub fn visible_from(
    scene: &SyntheticScene,
    p: &Vector3<f64>,
    patch: usize,
    pose: &RigidPose,
    intrinsics: &CameraIntrinsics,
) -> bool {
    let c = pose.inverse().transform_point(p);
    let Some(px) = intrinsics.project(&c) else {
        return false;
    };
    let (w, h) = (intrinsics.width as f64, intrinsics.height as f64);
    if !(px.x >= -0.5 && px.x < w - 0.5 && px.y >= -0.5 && px.y < h - 0.5) {
        return false;
    }
    let origin = pose.translation();
    let dir = p - origin;
    match scene.cast(origin, &dir) {
        Some(hit) => hit.patch == patch || (hit.distance - dir.norm()).abs() <= 1e-6 * (1.0 + dir.norm()),
        None => false,
    }
}

/// Surface samples seen by at least one camera, plus the exact poses.
pub fn ground_truth(
    scene: &SyntheticScene,
    poses: &[RigidPose],
    intrinsics: &CameraIntrinsics,
    spacing: f64,
) -> (SurfaceSamples, Vec<RigidPose>) {
    let all = sample_surfaces(scene, spacing);
    let patch_of: Vec<usize> = scene
        .patches
        .iter()
        .enumerate()
        .flat_map(|(k, p)| {
            let nu = (p.u.norm() / spacing).round().max(1.0) as usize;
            let nv = (p.v.norm() / spacing).round().max(1.0) as usize;
            std::iter::repeat_n(k, (nu + 1) * (nv + 1))
        })
        .collect();
    let keep: Vec<bool> = all
        .points
        .par_iter()
        .zip(patch_of.par_iter())
        .map(|(p, &k)| poses.iter().any(|pose| visible_from(scene, p, k, pose, intrinsics)))
        .collect();
    let mut out = SurfaceSamples::default();
    for (i, &k) in keep.iter().enumerate() {
        if k {
            out.points.push(all.points[i]);
            out.normals.push(all.normals[i]);
            out.labels.push(all.labels[i]);
        }
    }
    (out, poses.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_plane_scene() -> SyntheticScene {
        let p = Patch::new(
            Vector3::new(-0.5, -0.5, 2.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Texture::flat([0.5, 0.5, 0.5]),
            0,
        )
        .unwrap();
        SyntheticScene::new(vec![p], vec!["plane".into()], random_class_features(1, 4, 0)).unwrap()
    }

    #[test]
    fn unit_plane_at_1cm_gives_10201_points() {
        let scene = unit_plane_scene();
        let s = sample_surfaces(&scene, 0.01);
        assert_eq!(s.len(), 101 * 101);
        assert!(s.normals.iter().all(|n| *n == s.normals[0]));

        let k = CameraIntrinsics::from_fov(160, 120, 60.0).unwrap();
        let (gt, poses) = ground_truth(&scene, &[RigidPose::identity()], &k, 0.01);
        assert_eq!(gt.len(), 10_201);
        assert!(gt.normals.iter().all(|n| *n == gt.normals[0]));
        assert_eq!(poses.len(), 1);
    }

    #[test]
    fn empty_scene_gives_empty_cloud() {
        let scene = SyntheticScene::empty(4);
        let k = CameraIntrinsics::from_fov(160, 120, 60.0).unwrap();
        let (gt, _) = ground_truth(&scene, &[RigidPose::identity()], &k, 0.01);
        assert!(gt.is_empty());
    }

    #[test]
    fn box_has_six_normal_directions() {
        let patches = box_patches(
            &Vector3::new(-0.2, -0.2, 1.8),
            &Vector3::new(0.2, 0.2, 2.2),
            Texture::flat([0.2, 0.4, 0.6]),
            0,
        )
        .unwrap();
        let scene = SyntheticScene::new(patches, vec!["box".into()], random_class_features(1, 4, 0)).unwrap();
        let s = sample_surfaces(&scene, 0.05);
        let mut dirs: Vec<Vector3<f64>> = Vec::new();
        for n in &s.normals {
            if dirs.iter().all(|d| (d - n).norm() > 1e-9) {
                dirs.push(*n);
            }
        }
        assert_eq!(dirs.len(), 6);
        // outward: each face normal points away from the box center
        let center = Vector3::new(0.0, 0.0, 2.0);
        for p in &scene.patches {
            let face_center = p.origin + (p.u + p.v) * 0.5;
            assert!((face_center - center).dot(&p.normal) > 0.0);
        }
    }

    #[test]
    fn occluded_samples_are_dropped() {
        let mut scene = unit_plane_scene();
        // small square in front of the plane, hiding its center
        scene.patches.push(
            Patch::new(
                Vector3::new(-0.1, -0.1, 1.0),
                Vector3::new(0.2, 0.0, 0.0),
                Vector3::new(0.0, 0.2, 0.0),
                Texture::flat([1.0, 0.0, 0.0]),
                0,
            )
            .unwrap(),
        );
        let k = CameraIntrinsics::from_fov(160, 120, 60.0).unwrap();
        let (gt, _) = ground_truth(&scene, &[RigidPose::identity()], &k, 0.01);
        let hidden = gt
            .points
            .iter()
            .filter(|p| p.z > 1.5 && p.x.abs() < 0.15 && p.y.abs() < 0.15)
            .count();
        assert_eq!(hidden, 0);
        assert!(gt.len() > 8500);
    }

    #[test]
    fn class_features_are_distinct_units() {
        let f = random_class_features(12, 16, 3);
        for (i, a) in f.iter().enumerate() {
            assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            for b in &f[..i] {
                assert!(cosine(a, b) < MAX_CLASS_COSINE);
            }
        }
    }

    #[test]
    fn spec_round_trips_through_json() {
        let json = r#"{
            "classes": ["floor", "crate"],
            "feature_dim": 8,
            "surfaces": [
                {"type": "patch", "origin": [0,0,0], "u": [2,0,0], "v": [0,2,0], "class": "floor",
                 "texture": {"color": [0.8,0.8,0.8], "alt_color": [0.2,0.2,0.2], "checker": 0.5}},
                {"type": "box", "min": [0.5,0.5,0], "max": [1,1,0.5], "class": "crate",
                 "texture": {"color": [0.6,0.3,0.1]}}
            ]
        }"#;
        let spec: SceneSpec = serde_json::from_str(json).unwrap();
        let scene = SyntheticScene::from_spec(&spec).unwrap();
        assert_eq!(scene.patches.len(), 7);
        assert_eq!(scene.patches[3].class, 1);
        let bad = json.replace("\"crate\"]", "\"box\"]");
        let spec: SceneSpec = serde_json::from_str(&bad).unwrap();
        assert!(SyntheticScene::from_spec(&spec).is_err());
    }

    #[test]
    fn checker_alternates() {
        let t = Texture {
            color: [1.0, 1.0, 1.0],
            alt_color: Some([0.0, 0.0, 0.0]),
            checker: 0.5,
        };
        assert_eq!(t.at(0.1, 0.1).x, 1.0);
        assert_eq!(t.at(0.6, 0.1).x, 0.0);
        assert_eq!(t.at(0.6, 0.6).x, 1.0);
    }
}
