use nalgebra::{Matrix6, Vector3, Vector6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::spatial::KdTree;
use crate::types::{Config, RigidPose};

/// Fewest gated pairs a registration step accepts.
pub const MIN_PAIRS: usize = 6;

/// Source→target index pairs with per-pair weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Stop once the update twist norm drops below this.
    pub tolerance: f64,
    /// Pairs beyond `gate_factor × median` pair distance are rejected.
    pub gate_factor: f64,
    /// Geometric share of the colored objective.
    pub geometric_weight: f64,
    /// Neighbors used for per-point color gradients.
    pub color_neighbors: usize,
    /// Minimum `|n_s · n_q|` of a pair when source normals are given.
    pub normal_agreement: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self::from(&Config::default())
    }
}

impl From<&Config> for IcpParams {
    fn from(c: &Config) -> Self {
        Self {
            max_iterations: c.icp_max_iterations,
            tolerance: c.icp_tolerance,
            gate_factor: c.icp_gate_factor,
            geometric_weight: c.colored_icp_geometric_weight,
            color_neighbors: c.colored_icp_neighbors,
            normal_agreement: c.icp_normal_agreement,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    pub pose: RigidPose,
    /// Gated pairs at the returned pose.
    pub correspondences: CorrespondenceSet,
    /// Mean squared point-to-plane residual at the start of each iteration,
    /// plus one final entry at the returned pose.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Target cloud with normals (and optionally colors) plus its search tree.
pub struct IcpTarget<'a> {
    pub points: &'a [Vector3<f64>],
    pub normals: &'a [Vector3<f64>],
    pub colors: Option<&'a [Vector3<f64>]>,
    tree: KdTree,
}

impl<'a> IcpTarget<'a> {
    pub fn new(points: &'a [Vector3<f64>], normals: &'a [Vector3<f64>], colors: Option<&'a [Vector3<f64>]>) -> Self {
        assert_eq!(points.len(), normals.len(), "target points and normals differ in length");
        if let Some(c) = colors {
            assert_eq!(points.len(), c.len(), "target points and colors differ in length");
        }
        Self {
            points,
            normals,
            colors,
            tree: KdTree::new(points),
        }
    }
}

/// Luminance used by the photometric term.
pub fn intensity(c: &Vector3<f64>) -> f64 {
    0.299 * c.x + 0.587 * c.y + 0.114 * c.z
}

/// Per-target-point intensity gradient restricted to the tangent plane.
pub(crate) fn color_gradients(target: &IcpTarget<'_>, neighbors: usize) -> Vec<Vector3<f64>> {
    let colors = target.colors.expect("color gradients need target colors");
    (0..target.points.len())
        .into_par_iter()
        .map(|i| {
            let p = target.points[i];
            let n = target.normals[i];
            let ci = intensity(&colors[i]);
            let mut ata = nalgebra::Matrix3::<f64>::zeros();
            let mut atb = Vector3::zeros();
            for (j, _) in target.tree.knn(&p, neighbors + 1) {
                if j == i {
                    continue;
                }
                let q = target.points[j];
                let proj = q - n * (q - p).dot(&n) - p;
                ata += proj * proj.transpose();
                atb += proj * (intensity(&colors[j]) - ci);
            }
            // Soft constraint keeping the gradient in the tangent plane.
            let w = (ata.trace() + 1e-12) * 1.0;
            ata += n * n.transpose() * w;
            match ata.try_inverse() {
                Some(inv) => {
                    let g = inv * atb;
                    g - n * g.dot(&n)
                }
                None => Vector3::zeros(),
            }
        })
        .collect()
}

struct Association {
    /// `(source index, target index, distance)`
    pairs: Vec<(usize, usize, f64)>,
}

fn associate(
    source: &[Vector3<f64>],
    source_normals: Option<&[Vector3<f64>]>,
    pose: &RigidPose,
    target: &IcpTarget<'_>,
    params: &IcpParams,
) -> Association {
    let nearest: Vec<Option<(usize, f64)>> = source
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let (j, d2) = target.tree.nearest(&pose.transform_point(s))?;
            match source_normals {
                Some(normals) => {
                    let n = pose.transform_vector(&normals[i]);
                    (n.dot(&target.normals[j]).abs() >= params.normal_agreement).then_some((j, d2))
                }
                None => Some((j, d2)),
            }
        })
        .collect();
    let mut dists: Vec<f64> = nearest.iter().flatten().map(|&(_, d2)| d2.sqrt()).collect();
    if dists.is_empty() {
        return Association { pairs: Vec::new() };
    }
    let mid = dists.len() / 2;
    let (_, median, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let gate = (params.gate_factor * *median).max(1e-9);
    let pairs = nearest
        .iter()
        .enumerate()
        .filter_map(|(i, nn)| {
            let (j, d2) = (*nn)?;
            let d = d2.sqrt();
            (d <= gate).then_some((i, j, d))
        })
        .collect();
    Association { pairs }
}

fn mean_plane_residual(source: &[Vector3<f64>], pose: &RigidPose, target: &IcpTarget<'_>, a: &Association) -> f64 {
    if a.pairs.is_empty() {
        return 0.0;
    }
    a.pairs
        .iter()
        .map(|&(i, j, _)| {
            let r = (pose.transform_point(&source[i]) - target.points[j]).dot(&target.normals[j]);
            r * r
        })
        .sum::<f64>()
        / a.pairs.len() as f64
}

/// Solves the 6x6 normal equations, leaving unconstrained directions at zero.
fn solve_update(h: &Matrix6<f64>, g: &Vector6<f64>) -> Vector6<f64> {
    let svd = h.svd(true, true);
    let max = svd.singular_values.max();
    if max <= 0.0 {
        return Vector6::zeros();
    }
    svd.solve(g, max * 1e-10).unwrap_or_else(|_| Vector6::zeros())
}

struct Photometric<'a> {
    source_colors: &'a [Vector3<f64>],
    target_colors: &'a [Vector3<f64>],
    gradients: Vec<Vector3<f64>>,
    geometric_weight: f64,
}

fn run_icp(
    source: &[Vector3<f64>],
    source_normals: Option<&[Vector3<f64>]>,
    target: &IcpTarget<'_>,
    init: &RigidPose,
    params: &IcpParams,
    photometric: Option<&Photometric<'_>>,
) -> Result<IcpResult> {
    if source.is_empty() || target.points.is_empty() {
        return Err(Error::Registration("empty point cloud".into()));
    }
    if source_normals.is_some_and(|n| n.len() != source.len()) {
        return Err(Error::Registration("source normals do not match source points".into()));
    }
    let (wg, wc) = match photometric {
        Some(p) => (p.geometric_weight, 1.0 - p.geometric_weight),
        None => (1.0, 0.0),
    };
    let mut pose = *init;
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..params.max_iterations {
        let assoc = associate(source, source_normals, &pose, target, params);
        if assoc.pairs.len() < MIN_PAIRS {
            return Err(Error::Registration(format!(
                "only {} correspondences survived gating (need {MIN_PAIRS})",
                assoc.pairs.len()
            )));
        }
        residuals.push(mean_plane_residual(source, &pose, target, &assoc));
        iterations += 1;

        let moved: Vec<Vector3<f64>> = assoc.pairs.iter().map(|&(i, _, _)| pose.transform_point(&source[i])).collect();
        let center = moved.iter().sum::<Vector3<f64>>() / moved.len() as f64;

        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (&(i, j, _), s) in assoc.pairs.iter().zip(&moved) {
            let q = target.points[j];
            let n = target.normals[j];
            let arm = s - center;
            let jac = Vector6::new(
                arm.cross(&n).x,
                arm.cross(&n).y,
                arm.cross(&n).z,
                n.x,
                n.y,
                n.z,
            );
            let r = (s - q).dot(&n);
            h += jac * jac.transpose() * wg;
            g -= jac * (r * wg);

            if let Some(ph) = photometric {
                let d = ph.gradients[j];
                let u = s - n * (s - q).dot(&n);
                let rc = intensity(&ph.target_colors[j]) + d.dot(&(u - q)) - intensity(&ph.source_colors[i]);
                let jc = Vector6::new(arm.cross(&d).x, arm.cross(&d).y, arm.cross(&d).z, d.x, d.y, d.z);
                h += jc * jc.transpose() * wc;
                g -= jc * (rc * wc);
            }
        }
        let delta = solve_update(&h, &g);
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let v = Vector3::new(delta[3], delta[4], delta[5]);
        // Rotate about the centroid of the moved source, then translate.
        let step = RigidPose::from_translation(center + v)
            .compose(&RigidPose::from_rotation(nalgebra::Rotation3::new(omega), Vector3::zeros()))
            .compose(&RigidPose::from_translation(-center));
        pose = step.compose(&pose);
        if delta.norm() < params.tolerance {
            converged = true;
            break;
        }
    }

    let assoc = associate(source, source_normals, &pose, target, params);
    if assoc.pairs.len() < MIN_PAIRS {
        return Err(Error::Registration(format!(
            "only {} correspondences at the final pose (need {MIN_PAIRS})",
            assoc.pairs.len()
        )));
    }
    residuals.push(mean_plane_residual(source, &pose, target, &assoc));
    let correspondences = CorrespondenceSet {
        pairs: assoc.pairs.iter().map(|&(i, j, _)| (i, j)).collect(),
        weights: vec![1.0; assoc.pairs.len()],
    };
    Ok(IcpResult {
        pose,
        correspondences,
        residuals,
        iterations,
        converged,
    })
}

/// Point-to-plane ICP from `init`, minimizing `Σ ((R·s + t − q)·n_q)²` over
/// gated nearest-neighbor pairs.
pub fn icp_point_to_plane(
    source: &[Vector3<f64>],
    target: &IcpTarget<'_>,
    init: &RigidPose,
    params: &IcpParams,
) -> Result<IcpResult> {
    run_icp(source, None, target, init, params, None)
}

/// [`icp_point_to_plane`] that also drops pairs with disagreeing normals.
pub fn icp_point_to_plane_oriented(
    source: &[Vector3<f64>],
    source_normals: &[Vector3<f64>],
    target: &IcpTarget<'_>,
    init: &RigidPose,
    params: &IcpParams,
) -> Result<IcpResult> {
    run_icp(source, Some(source_normals), target, init, params, None)
}

/// Colored ICP without scale: the point-to-plane objective weighted by
/// `geometric_weight` plus the intensity residual on each target point's
/// tangent-plane color gradient weighted by the remainder.
pub fn icp_colored(
    source: &[Vector3<f64>],
    source_colors: &[Vector3<f64>],
    target: &IcpTarget<'_>,
    init: &RigidPose,
    params: &IcpParams,
) -> Result<IcpResult> {
    colored(source, None, source_colors, target, init, params)
}

/// [`icp_colored`] that also drops pairs with disagreeing normals.
pub fn icp_colored_oriented(
    source: &[Vector3<f64>],
    source_normals: &[Vector3<f64>],
    source_colors: &[Vector3<f64>],
    target: &IcpTarget<'_>,
    init: &RigidPose,
    params: &IcpParams,
) -> Result<IcpResult> {
    colored(source, Some(source_normals), source_colors, target, init, params)
}

fn colored(
    source: &[Vector3<f64>],
    source_normals: Option<&[Vector3<f64>]>,
    source_colors: &[Vector3<f64>],
    target: &IcpTarget<'_>,
    init: &RigidPose,
    params: &IcpParams,
) -> Result<IcpResult> {
    let target_colors = target
        .colors
        .ok_or_else(|| Error::Registration("colored ICP needs target colors".into()))?;
    if source_colors.len() != source.len() {
        return Err(Error::Registration("source colors do not match source points".into()));
    }
    let photometric = Photometric {
        source_colors,
        target_colors,
        gradients: color_gradients(target, params.color_neighbors),
        geometric_weight: params.geometric_weight,
    };
    run_icp(source, source_normals, target, init, params, Some(&photometric))
}
