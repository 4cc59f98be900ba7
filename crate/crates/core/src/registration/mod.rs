//! Pose estimation against the map.
//!
//! A new prediction is first registered coarsely by transferring ICP
//! correspondences through a pixel-aligned frame shared with the previous
//! inference, then refined with colored ICP against a voxel-selected submap.

mod icp;

use nalgebra::Vector3;

pub use icp::{
    icp_colored, icp_colored_oriented, icp_point_to_plane, icp_point_to_plane_oriented, intensity, CorrespondenceSet, IcpParams, IcpResult, IcpTarget, MIN_PAIRS,
};

use crate::alignment::umeyama;
use crate::error::{Error, Result};
use crate::types::{CoarseWeighting, Config, GaussianMap, Prediction, RigidPose};

/// Every `stride`-th element so that at most `max` remain.
pub(crate) fn stride_subsample(indices: &[usize], max: usize) -> Vec<usize> {
    if max == 0 || indices.len() <= max {
        return indices.to_vec();
    }
    let stride = indices.len().div_ceil(max);
    indices.iter().step_by(stride).copied().collect()
}

#[derive(Debug, Clone)]
pub struct CoarseRegistration {
    /// Map-frame pose of the new prediction's frame.
    pub pose: RigidPose,
    /// ICP pose of the new prediction against the shared frame's new prediction.
    pub icp_pose: RigidPose,
    /// Composed pairs as `(pixel in new prediction, pixel in shared frame)`.
    pub pairs: Vec<(usize, usize)>,
    /// RMS distance of the composed pairs after applying `pose`.
    pub residual_rms: f64,
}

/// Registers `o_new` into the map frame through a frame predicted twice.
///
/// ICP between `o_new` and `o_shared_new` (same inference) yields pixel
/// pairs; pixel alignment carries them onto `o_shared_old`, which is already
/// in the map frame. The rigid fit over those pixel-aligned pairs composed
/// with the ICP pose gives the coarse map-frame pose.
pub fn transfer_coarse_registration(
    o_new: &Prediction,
    o_shared_new: &Prediction,
    o_shared_old: &Prediction,
    config: &Config,
) -> Result<CoarseRegistration> {
    if o_shared_new.frame_id != o_shared_old.frame_id {
        return Err(Error::InvalidInput(format!(
            "shared predictions come from different frames ({} vs {})",
            o_shared_new.frame_id, o_shared_old.frame_id
        )));
    }
    if o_shared_new.pixel_count() != o_shared_old.pixel_count() {
        return Err(Error::InvalidInput("shared predictions are not pixel-aligned".into()));
    }
    let params = IcpParams::from(config);
    let src_pixels = stride_subsample(&o_new.valid_indices(), config.icp_max_source_points);
    let source: Vec<Vector3<f64>> = src_pixels.iter().map(|&i| o_new.points[i]).collect();
    let src_normals: Vec<Vector3<f64>> = src_pixels.iter().map(|&i| o_new.normals[i]).collect();
    let tgt_pixels = o_shared_new.valid_indices();
    let tgt_points: Vec<Vector3<f64>> = tgt_pixels.iter().map(|&i| o_shared_new.points[i]).collect();
    let tgt_normals: Vec<Vector3<f64>> = tgt_pixels.iter().map(|&i| o_shared_new.normals[i]).collect();
    if source.is_empty() || tgt_points.is_empty() {
        return Err(Error::Registration(format!(
            "frame {}: no valid points for coarse registration",
            o_new.frame_id
        )));
    }
    let target = IcpTarget::new(&tgt_points, &tgt_normals, None);
    let icp = icp_point_to_plane_oriented(&source, &src_normals, &target, &RigidPose::identity(), &params)?;

    let mut pairs = Vec::new();
    let mut from = Vec::new();
    let mut to = Vec::new();
    let mut weights = Vec::new();
    for (&(si, ti), &w) in icp.correspondences.pairs.iter().zip(&icp.correspondences.weights) {
        let px = tgt_pixels[ti];
        if !o_shared_old.valid[px] {
            continue;
        }
        pairs.push((src_pixels[si], px));
        from.push(o_shared_new.points[px]);
        to.push(o_shared_old.points[px]);
        weights.push(match config.coarse_weighting {
            CoarseWeighting::IcpWeights => w,
            CoarseWeighting::Uniform => 1.0,
        });
    }
    if pairs.len() < MIN_PAIRS {
        return Err(Error::Registration(format!(
            "frame {}: {} composed pairs after masking (need {MIN_PAIRS})",
            o_new.frame_id,
            pairs.len()
        )));
    }
    let shared = umeyama(&from, &to, Some(&weights), false)?.rigid();
    let pose = shared.compose(&icp.pose);
    let residual_rms = (pairs
        .iter()
        .map(|&(i, j)| (pose.transform_point(&o_new.points[i]) - o_shared_old.points[j]).norm_squared())
        .sum::<f64>()
        / pairs.len() as f64)
        .sqrt();
    Ok(CoarseRegistration {
        pose,
        icp_pose: icp.pose,
        pairs,
        residual_rms,
    })
}

/// Map Gaussians around the currently observable region.
#[derive(Debug, Clone, Default)]
pub struct Submap {
    /// Sorted indices into the map.
    pub gaussian_indices: Vec<usize>,
    pub means: Vec<Vector3<f64>>,
    pub colors: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    /// The box selected nothing and the whole map was returned instead.
    pub fallback: bool,
}

impl Submap {
    pub fn len(&self) -> usize {
        self.gaussian_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussian_indices.is_empty()
    }

    fn from_indices(map: &GaussianMap, indices: Vec<usize>, fallback: bool) -> Self {
        let g = map.gaussians();
        Submap {
            means: indices.iter().map(|&i| g[i].mean).collect(),
            colors: indices.iter().map(|&i| g[i].color).collect(),
            normals: indices.iter().map(|&i| g[i].normal).collect(),
            gaussian_indices: indices,
            fallback,
        }
    }

    pub fn whole(map: &GaussianMap) -> Self {
        Self::from_indices(map, (0..map.len()).collect(), false)
    }
}

/// Axis-aligned bounds of `points`.
pub fn bounding_box(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let first = points.first()?;
    Some(points.iter().fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
}

/// Gaussians in every voxel touching the reference bounding box, expanded by
/// `margin × extent` on each side of every axis.
pub fn select_submap(map: &GaussianMap, reference_points: &[Vector3<f64>], margin: f64) -> Result<Submap> {
    let (lo, hi) = bounding_box(reference_points)
        .ok_or_else(|| Error::InvalidInput("submap selection needs reference points".into()))?;
    let pad = (hi - lo) * margin;
    let (lo, hi) = (lo - pad, hi + pad);
    let (klo, khi) = (map.voxel_key(&lo), map.voxel_key(&hi));
    let mut indices: Vec<usize> = map
        .occupied_cells()
        .filter(|(key, _)| (0..3).all(|a| key[a] >= klo[a] && key[a] <= khi[a]))
        .flat_map(|(_, ids)| ids.iter().copied())
        .collect();
    if indices.is_empty() {
        log::warn!("submap box selected no Gaussians; falling back to the whole map");
        return Ok(Submap::from_indices(map, (0..map.len()).collect(), true));
    }
    indices.sort_unstable();
    Ok(Submap::from_indices(map, indices, false))
}

#[derive(Debug, Clone)]
pub struct Localization {
    /// Transform from the new prediction's frame into the map frame.
    pub world_from_prediction: RigidPose,
    pub coarse: CoarseRegistration,
    /// The new prediction expressed in the map frame.
    pub aligned: Prediction,
    pub submap: Submap,
}

impl Localization {
    /// Camera-to-map pose of the localized frame.
    pub fn camera_pose(&self) -> RigidPose {
        self.aligned.pose
    }
}

/// Coarse transfer registration followed by colored ICP against the submap
/// around the shared frame's aligned points.
pub fn localize(
    o_new: &Prediction,
    o_shared_new: &Prediction,
    o_shared_old: &Prediction,
    map: &GaussianMap,
    config: &Config,
) -> Result<Localization> {
    if map.is_empty() {
        return Err(Error::Registration("cannot localize against an empty map".into()));
    }
    let coarse = transfer_coarse_registration(o_new, o_shared_new, o_shared_old, config)?;
    let (_, reference, _, _) = o_shared_old.valid_cloud();
    let submap = select_submap(map, &reference, config.submap_margin)?;

    // The dense prediction is the ICP target and the sparse submap the
    // source, so every mean meets a nearby surface sample and regions the
    // map has not seen yet exert no pull.
    let coarse_aligned = o_new.transformed(&coarse.pose);
    let pixels = coarse_aligned.valid_indices();
    let points: Vec<Vector3<f64>> = pixels.iter().map(|&i| coarse_aligned.points[i]).collect();
    let normals: Vec<Vector3<f64>> = pixels.iter().map(|&i| coarse_aligned.normals[i]).collect();
    let colors: Vec<Vector3<f64>> = pixels.iter().map(|&i| coarse_aligned.colors[i]).collect();
    let target = IcpTarget::new(&points, &normals, Some(&colors));
    let correction = icp_colored_oriented(
        &submap.means,
        &submap.normals,
        &submap.colors,
        &target,
        &RigidPose::identity(),
        &IcpParams::from(config),
    )?;
    let refined_pose = correction.pose.inverse().compose(&coarse.pose);

    let aligned = o_new.transformed(&refined_pose);
    Ok(Localization {
        world_from_prediction: refined_pose,
        coarse,
        aligned,
        submap,
    })
}

#[cfg(test)]
mod tests {
    use nalgebra::Matrix3;

    use super::icp::tests::wavy;
    use super::*;
    use crate::types::{CameraIntrinsics, Gaussian};

    const W: usize = 40;
    const H: usize = 40;

    /// A prediction of the wavy surface over grid columns `col0..col0 + W`,
    /// expressed through `frame_from_world`.
    fn prediction(frame_id: u64, col0: usize, frame_from_world: &RigidPose) -> Prediction {
        let mut points = Vec::new();
        let mut normals = Vec::new();
        for r in 0..H {
            for c in col0..col0 + W {
                let (p, n) = wavy(-1.0 + c as f64 * 0.04, -0.8 + r as f64 * 0.04);
                points.push(frame_from_world.transform_point(&p));
                normals.push(frame_from_world.transform_vector(&n));
            }
        }
        let n = points.len();
        Prediction {
            frame_id,
            colors: points.iter().map(|p| Vector3::repeat(0.5 + 0.2 * (p.x * 5.0).sin())).collect(),
            points,
            valid: vec![true; n],
            normals,
            features: vec![1.0; n],
            feature_dim: 1,
            pose: frame_from_world.compose(&RigidPose::identity()),
            intrinsics: CameraIntrinsics::new(30.0, 30.0, 19.5, 19.5, W, H).unwrap(),
        }
    }

    fn drift() -> RigidPose {
        RigidPose::from_axis_angle(&Vector3::new(0.3, 1.0, 0.2), 0.2, Vector3::new(0.4, -0.2, 0.1))
    }

    #[test]
    fn noise_free_triple_recovers_map_alignment() {
        // The new inference lives in a frame offset from the map by `drift`.
        let world_from_new = drift();
        let new_from_world = world_from_new.inverse();
        let shared_old = prediction(1, 0, &RigidPose::identity());
        let shared_new = prediction(1, 0, &new_from_world);
        let o_new = prediction(2, 12, &new_from_world);
        let reg = transfer_coarse_registration(&o_new, &shared_new, &shared_old, &Config::default()).unwrap();
        assert!(reg.pose.angle_to(&world_from_new).to_degrees() < 0.1);
        assert!(reg.pose.distance_to(&world_from_new) < 1e-3);
        assert!(reg.pose.is_valid());
    }

    #[test]
    fn identical_shared_predictions_return_the_icp_pose() {
        let frame = drift();
        let shared = prediction(1, 0, &frame);
        let o_new = prediction(2, 10, &RigidPose::from_translation(Vector3::new(0.0, 0.0, 0.02)).compose(&frame));
        let reg = transfer_coarse_registration(&o_new, &shared, &shared, &Config::default()).unwrap();
        assert!(reg.pose.distance_to(&reg.icp_pose) < 1e-12);
        assert!(reg.pose.angle_to(&reg.icp_pose) < 1e-12);
    }

    #[test]
    fn scale_drift_leaves_a_residual() {
        let shared = prediction(1, 0, &RigidPose::identity());
        let mut o_new = prediction(2, 10, &RigidPose::identity());
        for p in &mut o_new.points {
            *p *= 1.05;
        }
        let reg = transfer_coarse_registration(&o_new, &shared, &shared, &Config::default()).unwrap();
        assert!(reg.pose.is_valid());
        assert!(reg.residual_rms > 0.0);
    }

    #[test]
    fn transfer_is_equivariant() {
        let new_from_world = drift().inverse();
        let shared_old = prediction(1, 0, &RigidPose::identity());
        let shared_new = prediction(1, 0, &new_from_world);
        let o_new = prediction(2, 12, &new_from_world);
        let q = RigidPose::from_axis_angle(&Vector3::new(1.0, 0.0, 1.0), 0.04, Vector3::new(0.02, 0.01, 0.0));
        let config = Config::default();
        let base = transfer_coarse_registration(&o_new, &shared_new, &shared_old, &config).unwrap();
        let moved = transfer_coarse_registration(&o_new.transformed(&q), &shared_new, &shared_old, &config).unwrap();
        let expect = base.pose.compose(&q.inverse());
        assert!(moved.pose.distance_to(&expect) < 1e-6);
        assert!(moved.pose.angle_to(&expect) < 1e-6);
    }

    #[test]
    fn mismatched_shared_frames_are_rejected() {
        let a = prediction(1, 0, &RigidPose::identity());
        let b = prediction(3, 0, &RigidPose::identity());
        assert!(transfer_coarse_registration(&a, &a, &b, &Config::default()).is_err());
    }

    #[test]
    fn masked_pixels_can_starve_the_fit() {
        let shared = prediction(1, 0, &RigidPose::identity());
        let mut old = shared.clone();
        old.valid.iter_mut().for_each(|v| *v = false);
        let o_new = prediction(2, 10, &RigidPose::identity());
        let err = transfer_coarse_registration(&o_new, &shared, &old, &Config::default());
        assert!(matches!(err, Err(Error::Registration(_))));
    }

    fn gaussian_at(p: Vector3<f64>) -> Gaussian {
        Gaussian {
            mean: p,
            covariance: Matrix3::identity() * 1e-3,
            color: Vector3::repeat(0.5),
            normal: Vector3::z(),
            feature: vec![1.0],
            blend_state: 1.0,
        }
    }

    fn ten_metre_map() -> GaussianMap {
        let mut gs = Vec::new();
        for i in 0..=20 {
            for j in 0..=20 {
                gs.push(gaussian_at(Vector3::new(i as f64 * 0.5, j as f64 * 0.5, 0.0)));
            }
        }
        GaussianMap::from_gaussians(gs, 0.2, 1e-8, 1)
    }

    #[test]
    fn submap_keeps_the_observed_corner() {
        let map = ten_metre_map();
        let reference = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(2.0, 2.0, 0.0)];
        let sub = select_submap(&map, &reference, 0.1).unwrap();
        assert!(!sub.fallback);
        assert!(sub.len() < map.len());
        assert!(sub.gaussian_indices.windows(2).all(|w| w[0] < w[1]));
        for (i, g) in map.gaussians().iter().enumerate() {
            let inside = (0..2).all(|a| g.mean[a] >= 0.0 && g.mean[a] <= 2.0);
            if inside {
                assert!(sub.gaussian_indices.contains(&i));
            }
        }
        for m in &sub.means {
            assert!(m.x <= 2.4 && m.y <= 2.4);
        }
    }

    #[test]
    fn submap_covering_everything_is_the_map() {
        let map = ten_metre_map();
        let reference = vec![Vector3::new(-1.0, -1.0, -1.0), Vector3::new(11.0, 11.0, 1.0)];
        let sub = select_submap(&map, &reference, 0.1).unwrap();
        assert_eq!(sub.len(), map.len());
        assert!(!sub.fallback);
    }

    #[test]
    fn disjoint_reference_falls_back_to_whole_map() {
        let map = ten_metre_map();
        let reference = vec![Vector3::new(50.0, 50.0, 50.0), Vector3::new(51.0, 51.0, 51.0)];
        let sub = select_submap(&map, &reference, 0.1).unwrap();
        assert!(sub.fallback);
        assert_eq!(sub.len(), map.len());
    }

    #[test]
    fn empty_reference_is_an_error() {
        assert!(select_submap(&ten_metre_map(), &[], 0.1).is_err());
    }

    #[test]
    fn localize_corrects_an_offset_against_a_textured_map() {
        let shared_old = prediction(1, 0, &RigidPose::identity());
        let truth = RigidPose::identity();
        let o_new = prediction(2, 12, &truth);
        // Map built straight from the world surface.
        let world = prediction(0, 0, &RigidPose::identity());
        let wide = prediction(0, 20, &RigidPose::identity());
        let gs: Vec<Gaussian> = world
            .points
            .iter()
            .chain(&wide.points)
            .zip(world.normals.iter().chain(&wide.normals))
            .zip(world.colors.iter().chain(&wide.colors))
            .map(|((p, n), c)| Gaussian {
                normal: *n,
                color: *c,
                ..gaussian_at(*p)
            })
            .collect();
        let map = GaussianMap::from_gaussians(gs, 0.2, 1e-8, 1);
        // The new inference is offset by 10 cm from the map frame.
        let offset = RigidPose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let shared_new = shared_old.transformed(&offset);
        let o_new_off = o_new.transformed(&offset);
        let loc = localize(&o_new_off, &shared_new, &shared_old, &map, &Config::default()).unwrap();
        let expect = offset.inverse();
        assert!(loc.world_from_prediction.distance_to(&expect) < 5e-3);
        assert!(loc.camera_pose().distance_to(&truth) < 5e-3);
    }
}
