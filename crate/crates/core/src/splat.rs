//! Screen-space splatting of Gaussians and raster-based refinement.
//!
//! Gaussians are projected to 2D ellipses, composited front to back with a
//! constant opacity into an expected-depth image, and measurement Gaussians
//! that EM left unexplained are either merged into nearby map Gaussians in
//! image space or appended as new map content.

use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};
use rayon::prelude::*;

use crate::cluster::{choose_k, gaussians_from_cloud, PointCloud};
use crate::error::Result;
use crate::linalg::{cosine, floor_covariance, floor_covariance_2d};
use crate::spatial::KdTree;
use crate::types::{CameraIntrinsics, Config, Gaussian, GaussianMap, Prediction, RigidPose};

/// Tile edge length in pixels.
pub const TILE: usize = 16;
/// Squared Mahalanobis radius beyond which a splat contributes nothing.
pub const CUTOFF_SQ: f64 = 9.0;
/// Fraction of the image size by which the culling rectangle is expanded.
pub const CULL_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub inv_cov2d: Matrix2<f64>,
    /// Camera-frame depth in meters.
    pub depth: f64,
    /// Index of the Gaussian in the list it was projected from.
    pub index: usize,
}

impl ProjectedGaussian {
    /// Squared 2D Mahalanobis distance of pixel position `p`.
    pub fn mahalanobis_sq(&self, p: &Vector2<f64>) -> f64 {
        let d = p - self.mean2d;
        (d.transpose() * self.inv_cov2d * d)[(0, 0)]
    }

    /// Half-width of the square that contains the truncated footprint.
    pub fn radius(&self) -> f64 {
        let (a, b, c) = (self.cov2d[(0, 0)], self.cov2d[(0, 1)], self.cov2d[(1, 1)]);
        let mid = 0.5 * (a + c);
        let lambda_max = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
        CUTOFF_SQ.sqrt() * lambda_max.sqrt()
    }

    /// Alpha this splat contributes at pixel position `p`.
    pub fn alpha_at(&self, p: &Vector2<f64>, opacity: f64) -> f64 {
        let d2 = self.mahalanobis_sq(p);
        if d2 <= CUTOFF_SQ {
            opacity * (-0.5 * d2).exp()
        } else {
            0.0
        }
    }
}

/// Projects `g` into the camera at `pose` (camera-to-map). `None` when the
/// mean is closer than `near` or projects outside the expanded image.
pub fn project_gaussian(
    g: &Gaussian,
    index: usize,
    pose: &RigidPose,
    intrinsics: &CameraIntrinsics,
    near: f64,
    cov_floor: f64,
) -> Option<ProjectedGaussian> {
    let rot = pose.rotation().transpose();
    let pc = rot * (g.mean - pose.translation());
    if !(pc.z > near) {
        return None;
    }
    let z = pc.z;
    let mean2d = Vector2::new(
        intrinsics.fx * pc.x / z + intrinsics.cx,
        intrinsics.fy * pc.y / z + intrinsics.cy,
    );
    let (w, h) = (intrinsics.width as f64, intrinsics.height as f64);
    if mean2d.x < -CULL_MARGIN * w
        || mean2d.x > (1.0 + CULL_MARGIN) * w
        || mean2d.y < -CULL_MARGIN * h
        || mean2d.y > (1.0 + CULL_MARGIN) * h
    {
        return None;
    }
    let jac = Matrix2x3::new(
        intrinsics.fx / z,
        0.0,
        -intrinsics.fx * pc.x / (z * z),
        0.0,
        intrinsics.fy / z,
        -intrinsics.fy * pc.y / (z * z),
    );
    let t = jac * rot;
    let cov2d = floor_covariance_2d(&(t * g.covariance * t.transpose()), cov_floor);
    let inv_cov2d = cov2d.try_inverse()?;
    Some(ProjectedGaussian {
        mean2d,
        cov2d,
        inv_cov2d,
        depth: z,
        index,
    })
}

/// Projects every Gaussian, dropping culled ones.
pub fn project_all<'a>(
    gaussians: impl IntoParallelIterator<Item = (usize, &'a Gaussian)>,
    pose: &RigidPose,
    intrinsics: &CameraIntrinsics,
    config: &Config,
) -> Vec<ProjectedGaussian> {
    gaussians
        .into_par_iter()
        .filter_map(|(i, g)| project_gaussian(g, i, pose, intrinsics, config.near_plane, config.covariance_floor_2d))
        .collect()
}

/// Expected depth and accumulated opacity images, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthRender {
    pub width: usize,
    pub height: usize,
    /// `NaN` where the pixel is not valid.
    pub expected_depth: Vec<f64>,
    pub accumulated_alpha: Vec<f64>,
}

impl DepthRender {
    pub fn depth(&self, u: usize, v: usize) -> Option<f64> {
        let d = self.expected_depth[v * self.width + u];
        d.is_finite().then_some(d)
    }

    /// Depth at the pixel containing image position `p`, if inside and valid.
    pub fn depth_at(&self, p: &Vector2<f64>) -> Option<f64> {
        let (u, v) = (p.x.round(), p.y.round());
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        self.depth(u as usize, v as usize)
    }

    pub fn valid_count(&self) -> usize {
        self.expected_depth.iter().filter(|d| d.is_finite()).count()
    }
}

/// Front-to-back composite of `splats` (already depth-sorted) at pixel `p`.
/// Returns `(Σ w·z, Σ w)` where `Σ w` is the accumulated alpha.
pub(crate) fn composite<'a>(splats: impl Iterator<Item = &'a ProjectedGaussian>, p: &Vector2<f64>, opacity: f64) -> (f64, f64) {
    let mut transmittance = 1.0;
    let mut depth = 0.0;
    for s in splats {
        let a = s.alpha_at(p, opacity);
        if a > 0.0 {
            depth += a * transmittance * s.depth;
            transmittance *= 1.0 - a;
        }
    }
    (depth, 1.0 - transmittance)
}

fn depth_order(splats: &mut [ProjectedGaussian]) {
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
}

/// Tile rasterizer for expected depth with constant `opacity`. Pixels whose
/// accumulated alpha falls below `alpha_valid` get `NaN` depth.
pub fn render_expected_depth(
    splats: &[ProjectedGaussian],
    intrinsics: &CameraIntrinsics,
    opacity: f64,
    alpha_valid: f64,
) -> DepthRender {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let (tx, ty) = (w.div_ceil(TILE), h.div_ceil(TILE));
    let mut sorted = splats.to_vec();
    depth_order(&mut sorted);

    // Bin each splat into the tiles its truncated footprint touches; bins
    // inherit the global depth order.
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); tx * ty];
    for (si, s) in sorted.iter().enumerate() {
        let r = s.radius();
        let lo_u = ((s.mean2d.x - r).floor().max(0.0) as usize) / TILE;
        let lo_v = ((s.mean2d.y - r).floor().max(0.0) as usize) / TILE;
        let hi_u = (s.mean2d.x + r).ceil();
        let hi_v = (s.mean2d.y + r).ceil();
        if hi_u < 0.0 || hi_v < 0.0 {
            continue;
        }
        let hi_u = ((hi_u as usize) / TILE).min(tx - 1);
        let hi_v = ((hi_v as usize) / TILE).min(ty - 1);
        for by in lo_v..=hi_v {
            for bx in lo_u..=hi_u {
                bins[by * tx + bx].push(si);
            }
        }
    }

    let tiles: Vec<Vec<(usize, f64, f64)>> = (0..tx * ty)
        .into_par_iter()
        .map(|t| {
            let (bx, by) = (t % tx, t / tx);
            let mut out = Vec::with_capacity(TILE * TILE);
            for v in by * TILE..((by + 1) * TILE).min(h) {
                for u in bx * TILE..((bx + 1) * TILE).min(w) {
                    let p = Vector2::new(u as f64, v as f64);
                    let (dz, acc) = composite(bins[t].iter().map(|&i| &sorted[i]), &p, opacity);
                    out.push((v * w + u, dz, acc));
                }
            }
            out
        })
        .collect();

    let mut render = DepthRender {
        width: w,
        height: h,
        expected_depth: vec![f64::NAN; w * h],
        accumulated_alpha: vec![0.0; w * h],
    };
    for (px, dz, acc) in tiles.into_iter().flatten() {
        render.accumulated_alpha[px] = acc;
        if acc >= alpha_valid && acc > 0.0 {
            render.expected_depth[px] = dz / acc;
        }
    }
    render
}

/// Renders `gaussians` (all, or only `subset`) from `pose`.
pub fn render_map(
    map: &GaussianMap,
    subset: Option<&[usize]>,
    pose: &RigidPose,
    intrinsics: &CameraIntrinsics,
    config: &Config,
) -> (Vec<ProjectedGaussian>, DepthRender) {
    let g = map.gaussians();
    let splats = match subset {
        Some(ids) => project_all(ids.par_iter().map(|&i| (i, &g[i])), pose, intrinsics, config),
        None => project_all(g.par_iter().enumerate(), pose, intrinsics, config),
    };
    let render = render_expected_depth(&splats, intrinsics, config.opacity, config.alpha_valid);
    (splats, render)
}

/// Image-space match between a measurement Gaussian and a map Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Map index.
    pub gaussian: usize,
    /// Non-squared 2D Mahalanobis distance under the pooled covariance.
    pub distance: f64,
    pub feature_cosine: f64,
    /// Softmax share of `exp(−½ distance)` among all candidates of the member.
    pub softmax: f64,
    /// `softmax × feature_cosine`.
    pub weight: f64,
}

/// Where a measurement Gaussian ended up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fate {
    Merged,
    /// Landed on pixels without valid map depth.
    Unmapped,
    /// Failed the distance or depth test; kept as a front observation.
    Front,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefineReport {
    /// Measurement Gaussians built from the leftovers.
    pub built: usize,
    pub merged: usize,
    pub appended: usize,
    /// Map indices that received a merge update, ascending.
    pub updated: Vec<usize>,
    /// Indices of appended Gaussians in the map.
    pub new_indices: Vec<usize>,
}

/// Image-space candidates of `member` among the projected map splats.
fn candidates(
    member: &ProjectedGaussian,
    member_feature: &[f64],
    map: &GaussianMap,
    splats: &[ProjectedGaussian],
    tree: &KdTree,
    k: usize,
) -> Vec<Candidate> {
    let q = Vector3::new(member.mean2d.x, member.mean2d.y, 0.0);
    let near = tree.knn(&q, k);
    let dists: Vec<f64> = near
        .iter()
        .map(|&(j, _)| {
            let s = &splats[j];
            let pooled = s.cov2d + member.cov2d;
            let d = member.mean2d - s.mean2d;
            match pooled.try_inverse() {
                Some(inv) => (d.transpose() * inv * d)[(0, 0)].max(0.0).sqrt(),
                None => f64::INFINITY,
            }
        })
        .collect();
    let m = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = dists.iter().map(|d| (-0.5 * (d - m)).exp()).collect();
    let total: f64 = e.iter().sum();
    near.iter()
        .zip(dists)
        .zip(e)
        .map(|((&(j, _), distance), e)| {
            let gi = splats[j].index;
            let feature_cosine = cosine(&map.get(gi).feature, member_feature);
            let softmax = if total > 0.0 { e / total } else { 0.0 };
            Candidate {
                gaussian: gi,
                distance,
                feature_cosine,
                softmax,
                weight: softmax * feature_cosine,
            }
        })
        .collect()
}

/// `max ω / (α + max ω)`.
pub fn raster_gamma(max_weight: f64, alpha: f64) -> f64 {
    max_weight / (alpha + max_weight)
}

/// Weighted average of the members merged into `target`, blended by γ.
fn merge_into(target: &Gaussian, members: &[(&Gaussian, f64)], floor: f64) -> Option<Gaussian> {
    let total: f64 = members.iter().map(|(_, w)| w).sum();
    let max_w = members.iter().map(|(_, w)| *w).fold(0.0, f64::max);
    if !(total > 0.0) {
        return None;
    }
    let mut mean = Vector3::zeros();
    let mut cov = nalgebra::Matrix3::zeros();
    let mut color = Vector3::zeros();
    let mut nsum = Vector3::zeros();
    for (g, w) in members {
        mean += g.mean * *w;
        cov += g.covariance * *w;
        color += g.color * *w;
        let n = if g.normal.dot(&target.normal) < 0.0 { -g.normal } else { g.normal };
        nsum += n * *w;
    }
    mean /= total;
    cov /= total;
    color /= total;
    let normal = if nsum.norm() > 0.0 { nsum.normalize() } else { target.normal };

    let gamma = raster_gamma(max_w, target.blend_state);
    let mix = |old: f64, new: f64| (1.0 - gamma) * old + gamma * new;
    let blended_normal = target.normal.zip_map(&normal, mix);
    let (covariance, _) = floor_covariance(&target.covariance.zip_map(&cov, mix), floor);
    Some(Gaussian {
        mean: target.mean.zip_map(&mean, mix),
        covariance,
        color: target.color.zip_map(&color, mix).map(|c| c.clamp(0.0, 1.0)),
        normal: if blended_normal.norm() > 0.0 {
            blended_normal.normalize()
        } else {
            target.normal
        },
        feature: target.feature.clone(),
        blend_state: target.blend_state,
    })
}

/// Decides the fate of each measurement Gaussian and the candidates it
/// merges with.
pub fn associate(
    members: &[Gaussian],
    map: &GaussianMap,
    subset: Option<&[usize]>,
    pose: &RigidPose,
    intrinsics: &CameraIntrinsics,
    config: &Config,
) -> Vec<(Fate, Vec<Candidate>)> {
    let (map_splats, map_render) = render_map(map, subset, pose, intrinsics, config);
    let member_splats: Vec<Option<ProjectedGaussian>> = members
        .par_iter()
        .enumerate()
        .map(|(i, g)| project_gaussian(g, i, pose, intrinsics, config.near_plane, config.covariance_floor_2d))
        .collect();
    let member_render = render_expected_depth(
        &member_splats.iter().flatten().cloned().collect::<Vec<_>>(),
        intrinsics,
        config.opacity,
        config.alpha_valid,
    );
    let tree = KdTree::new(
        &map_splats
            .iter()
            .map(|s| Vector3::new(s.mean2d.x, s.mean2d.y, 0.0))
            .collect::<Vec<_>>(),
    );
    let k = config.k_2d.min(map_splats.len());

    member_splats
        .par_iter()
        .enumerate()
        .map(|(i, ms)| {
            let Some(ms) = ms else {
                return (Fate::Unmapped, Vec::new());
            };
            let Some(map_depth) = map_render.depth_at(&ms.mean2d) else {
                return (Fate::Unmapped, Vec::new());
            };
            if k == 0 {
                return (Fate::Unmapped, Vec::new());
            }
            let member_depth = member_render.depth_at(&ms.mean2d).unwrap_or(ms.depth);
            let cands: Vec<Candidate> = candidates(ms, &members[i].feature, map, &map_splats, &tree, k)
                .into_iter()
                .filter(|c| c.distance < config.tau_sigma_2d && c.feature_cosine >= 0.0)
                .collect();
            let behind = member_depth > map_depth - config.refine_depth_tolerance;
            if cands.is_empty() || !behind {
                (Fate::Front, Vec::new())
            } else {
                (Fate::Merged, cands)
            }
        })
        .collect()
}

/// Folds unexplained points of `aligned` into the map.
///
/// Measurement Gaussians are built from `leftovers`, rendered alongside the
/// map from the aligned camera pose, and either merged into image-space
/// neighbors they sit behind or appended.
pub fn refine(
    map: &mut GaussianMap,
    aligned: &Prediction,
    leftovers: &[usize],
    subset: Option<&[usize]>,
    config: &Config,
) -> Result<RefineReport> {
    let mut cloud = PointCloud::new(aligned.feature_dim);
    for &px in leftovers {
        cloud.push_pixel(aligned, px);
    }
    if cloud.len() < 4 {
        return Ok(RefineReport::default());
    }
    let k = choose_k(cloud.len(), 1, config.lambda);
    let seed = config.seed ^ aligned.frame_id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let members = gaussians_from_cloud(&cloud, k, config, seed)?;
    let fates = associate(&members, map, subset, &aligned.pose, &aligned.intrinsics, config);

    let mut report = RefineReport {
        built: members.len(),
        ..Default::default()
    };
    let mut per_target: std::collections::BTreeMap<usize, Vec<(&Gaussian, f64)>> = Default::default();
    let mut fresh = Vec::new();
    for (g, (fate, cands)) in members.iter().zip(&fates) {
        match fate {
            Fate::Merged => {
                report.merged += 1;
                for c in cands {
                    per_target.entry(c.gaussian).or_default().push((g, c.weight));
                }
            }
            Fate::Unmapped | Fate::Front => fresh.push(g.clone()),
        }
    }
    let floor = map.covariance_floor();
    let merged: Vec<(usize, Option<Gaussian>)> = per_target
        .par_iter()
        .map(|(&gi, ms)| (gi, merge_into(map.get(gi), ms, floor)))
        .collect();
    for (gi, g) in merged {
        if let Some(g) = g {
            map.set(gi, g);
            report.updated.push(gi);
        }
    }
    for g in fresh {
        report.new_indices.push(map.push(g));
        report.appended += 1;
    }
    log::debug!(
        "refine: built {}, merged {}, appended {}",
        report.built,
        report.merged,
        report.appended
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::testutil::gaussian;

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 79.5, 59.5, 160, 120).unwrap()
    }

    fn iso(mean: Vector3<f64>, sigma: f64) -> Gaussian {
        gaussian(mean, [sigma * sigma; 3])
    }

    #[test]
    fn on_axis_mean_lands_on_principal_point() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let p = project_gaussian(&iso(Vector3::new(0.0, 0.0, 1.0), 0.05), 0, &RigidPose::identity(), &k, 0.01, 0.3).unwrap();
        assert_eq!(p.mean2d, Vector2::new(50.0, 50.0));
        assert_eq!(p.depth, 1.0);
    }

    #[test]
    fn isotropic_covariance_scales_with_focal_over_depth() {
        let (f, sigma, z) = (100.0, 0.05, 2.0);
        let p = project_gaussian(&iso(Vector3::new(0.0, 0.0, z), sigma), 0, &RigidPose::identity(), &camera(), 0.01, 0.3).unwrap();
        let expect = (f * sigma / z).powi(2);
        assert!((p.cov2d - Matrix2::identity() * expect).amax() < 1e-12);
    }

    #[test]
    fn behind_and_off_screen_gaussians_are_culled() {
        let k = camera();
        let pose = RigidPose::identity();
        assert!(project_gaussian(&iso(Vector3::new(0.0, 0.0, -1.0), 0.1), 0, &pose, &k, 0.01, 0.3).is_none());
        assert!(project_gaussian(&iso(Vector3::new(0.0, 0.0, 0.005), 0.1), 0, &pose, &k, 0.01, 0.3).is_none());
        assert!(project_gaussian(&iso(Vector3::new(5.0, 0.0, 1.0), 0.1), 0, &pose, &k, 0.01, 0.3).is_none());
        // Inside the 20% margin but outside the image.
        assert!(project_gaussian(&iso(Vector3::new(0.9, 0.0, 1.0), 0.1), 0, &pose, &k, 0.01, 0.3).is_some());
    }

    #[test]
    fn projection_follows_the_camera_pose() {
        let pose = RigidPose::look_at(&Vector3::new(0.0, 0.0, -3.0), &Vector3::zeros(), &-Vector3::y());
        let p = project_gaussian(&iso(Vector3::zeros(), 0.05), 0, &pose, &camera(), 0.01, 0.3).unwrap();
        assert!((p.depth - 3.0).abs() < 1e-12);
        assert!((p.mean2d - Vector2::new(79.5, 59.5)).norm() < 1e-9);
    }

    fn splats(gs: &[Gaussian]) -> Vec<ProjectedGaussian> {
        gs.iter()
            .enumerate()
            .filter_map(|(i, g)| project_gaussian(g, i, &RigidPose::identity(), &camera(), 0.01, 0.3))
            .collect()
    }

    #[test]
    fn single_large_gaussian_renders_its_depth() {
        let r = render_expected_depth(&splats(&[iso(Vector3::new(0.0, 0.0, 2.0), 1.0)]), &camera(), 0.8, 0.5);
        assert_eq!(r.depth(80, 60), Some(2.0));
        assert!(r.valid_count() > 1000);
        for d in r.expected_depth.iter().filter(|d| d.is_finite()) {
            assert!((d - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn front_gaussian_occludes_the_back_one() {
        let gs = [iso(Vector3::new(0.0, 0.0, 3.0), 1.5), iso(Vector3::new(0.0, 0.0, 1.0), 0.5)];
        let r = render_expected_depth(&splats(&gs), &camera(), 0.99, 0.5);
        let d = r.depth(80, 60).unwrap();
        let expect = (0.99 * 1.0 + 0.01 * 0.99 * 3.0) / (1.0 - 0.01 * 0.01);
        assert!((d - expect).abs() < 1e-3);
        assert!((d - 1.0).abs() < 0.03);
    }

    #[test]
    fn empty_scene_is_invalid_everywhere() {
        let r = render_expected_depth(&[], &camera(), 0.8, 0.5);
        assert_eq!(r.valid_count(), 0);
        assert!(r.accumulated_alpha.iter().all(|&a| a == 0.0));
    }

    /// Per-pixel compositing over every splat, without tiles or footprints.
    fn brute_force(splats: &[ProjectedGaussian], k: &CameraIntrinsics, opacity: f64, alpha_valid: f64) -> Vec<f64> {
        let mut order: Vec<&ProjectedGaussian> = splats.iter().collect();
        order.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap());
        let mut out = Vec::new();
        for v in 0..k.height {
            for u in 0..k.width {
                let (mut t, mut num) = (1.0, 0.0);
                for s in &order {
                    let d = Vector2::new(u as f64, v as f64) - s.mean2d;
                    let m = d.dot(&(s.inv_cov2d * d));
                    let a = if m <= 9.0 { opacity * (-0.5 * m).exp() } else { 0.0 };
                    num += a * t * s.depth;
                    t *= 1.0 - a;
                }
                out.push(if 1.0 - t >= alpha_valid { num / (1.0 - t) } else { f64::NAN });
            }
        }
        out
    }

    #[test]
    fn tiles_match_brute_force_compositing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = camera();
        for _ in 0..20 {
            let gs: Vec<Gaussian> = (0..3)
                .map(|_| {
                    let z = rng.random_range(0.5..4.0);
                    let a = Matrix3::from_fn(|_, _| rng.random_range(-0.3..0.3));
                    let mut g = iso(Vector3::new(rng.random_range(-1.0..1.0) * z * 0.6, rng.random_range(-1.0..1.0) * z * 0.5, z), 0.0);
                    g.covariance = a * a.transpose() + Matrix3::identity() * 1e-4;
                    g
                })
                .collect();
            let s = splats(&gs);
            let fast = render_expected_depth(&s, &k, 0.8, 0.5);
            let slow = brute_force(&s, &k, 0.8, 0.5);
            for (a, b) in fast.expected_depth.iter().zip(&slow) {
                assert_eq!(a.is_nan(), b.is_nan());
                if a.is_finite() {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }

    /// A full-resolution prediction whose first pixels hold `points`, all
    /// facing the camera at the origin.
    fn leftover_prediction(points: &[Vector3<f64>]) -> (Prediction, Vec<usize>) {
        let k = camera();
        let n = k.pixel_count();
        let mut pts = vec![Vector3::zeros(); n];
        pts[..points.len()].copy_from_slice(points);
        let mut valid = vec![false; n];
        valid[..points.len()].iter_mut().for_each(|v| *v = true);
        let pred = Prediction {
            frame_id: 3,
            points: pts,
            valid,
            colors: vec![Vector3::repeat(0.3); n],
            normals: vec![-Vector3::z(); n],
            features: [1.0, 0.0].repeat(n),
            feature_dim: 2,
            pose: RigidPose::identity(),
            intrinsics: k,
        };
        (pred, (0..points.len()).collect())
    }

    fn wall_map() -> GaussianMap {
        let mut gs = Vec::new();
        for i in 0..=10 {
            for j in 0..=10 {
                let mut g = gaussian(Vector3::new(-1.0 + 0.2 * i as f64, -1.0 + 0.2 * j as f64, 2.0), [0.01, 0.01, 1e-4]);
                g.normal = -Vector3::z();
                gs.push(g);
            }
        }
        GaussianMap::from_gaussians(gs, 0.2, 1e-8, 2)
    }

    fn patch(x0: f64, x1: f64, y0: f64, y1: f64, z: f64) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                pts.push(Vector3::new(x0 + (x1 - x0) * i as f64 / 39.0, y0 + (y1 - y0) * j as f64 / 39.0, z));
            }
        }
        pts
    }

    #[test]
    fn occluded_duplicates_are_merged() {
        let mut map = wall_map();
        let before = map.len();
        let (pred, left) = leftover_prediction(&patch(-0.6, 0.6, -0.6, 0.6, 2.05));
        let r = refine(&mut map, &pred, &left, None, &Config::default()).unwrap();
        assert!(r.built > 0);
        assert_eq!(r.merged, r.built);
        assert_eq!(r.appended, 0);
        assert_eq!(map.len(), before);
        assert!(!r.updated.is_empty());
        assert!(map.validate().is_empty());
    }

    #[test]
    fn unseen_region_is_appended() {
        let mut map = wall_map();
        let before = map.len();
        let (pred, left) = leftover_prediction(&patch(1.35, 1.55, -0.5, 0.5, 2.0));
        let r = refine(&mut map, &pred, &left, None, &Config::default()).unwrap();
        assert!(r.built > 0);
        assert_eq!(r.appended, r.built);
        assert_eq!(map.len(), before + r.built);
        for &i in &r.new_indices {
            assert_eq!(map.get(i).blend_state, 1.0);
        }
        assert!(map.validate().is_empty());
    }

    #[test]
    fn front_observations_are_appended() {
        let mut map = wall_map();
        let (pred, left) = leftover_prediction(&patch(-0.6, 0.6, -0.6, 0.6, 1.9));
        let r = refine(&mut map, &pred, &left, None, &Config::default()).unwrap();
        assert_eq!(r.merged, 0);
        assert_eq!(r.appended, r.built);
    }

    #[test]
    fn refine_conserves_measurement_gaussians() {
        let mut map = wall_map();
        let mut pts = patch(-0.6, 0.6, -0.6, 0.6, 2.05);
        pts.extend(patch(1.35, 1.55, -0.5, 0.5, 2.0));
        pts.extend(patch(-0.5, 0.0, -0.5, 0.0, 1.8));
        let (pred, left) = leftover_prediction(&pts);
        let before = map.len();
        let r = refine(&mut map, &pred, &left, None, &Config::default()).unwrap();
        assert_eq!(r.built, r.merged + r.appended);
        assert_eq!(map.len(), before + r.appended);
    }

    #[test]
    fn too_few_leftovers_is_a_no_op() {
        let mut map = wall_map();
        let (pred, left) = leftover_prediction(&patch(0.0, 0.1, 0.0, 0.1, 2.0)[..3]);
        assert_eq!(refine(&mut map, &pred, &left, None, &Config::default()).unwrap(), RefineReport::default());
    }

    #[test]
    fn merge_weights_softmax_sums_to_one() {
        let map = wall_map();
        let config = Config::default();
        let (splats, _) = render_map(&map, None, &RigidPose::identity(), &camera(), &config);
        let tree = KdTree::new(&splats.iter().map(|s| Vector3::new(s.mean2d.x, s.mean2d.y, 0.0)).collect::<Vec<_>>());
        let member = project_gaussian(&iso(Vector3::new(0.05, 0.03, 2.05), 0.05), 0, &RigidPose::identity(), &camera(), 0.01, 0.3).unwrap();
        let c = candidates(&member, &[1.0, 0.0], &map, &splats, &tree, 3);
        assert_eq!(c.len(), 3);
        let s: f64 = c.iter().map(|c| c.softmax).sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(c.iter().all(|c| c.weight >= 0.0));
    }

    #[test]
    fn gamma_is_a_proper_fraction() {
        for (w, a) in [(0.3, 1.0), (1.0, 0.01), (1e-6, 0.5)] {
            let g = raster_gamma(w, a);
            assert!(g > 0.0 && g < 1.0);
        }
    }
}
