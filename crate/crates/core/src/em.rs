//! Incremental EM update of the Gaussian map from one aligned prediction.
//!
//! Points are first gated against their nearest Gaussians, then soft-assigned
//! through a log-likelihood that mixes Mahalanobis distance, covariance
//! volume, normal agreement and feature similarity. Each Gaussian receives
//! one responsibility-weighted M-step per frame, blended into its current
//! parameters with a running-average weight driven by how evenly the new
//! points straddle it.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{cosine, floor_covariance, mahalanobis, sorted_eigen, spd_inverse};
use crate::spatial::KdTree;
use crate::types::{Config, Gaussian, GaussianMap, Prediction};

/// Per-Gaussian quantities reused across all points of a frame.
#[derive(Debug, Clone, Copy)]
struct GaussianTerms {
    inv_cov: Matrix3<f64>,
    log_det: f64,
}

fn gaussian_terms(map: &GaussianMap) -> Vec<Option<GaussianTerms>> {
    map.gaussians()
        .par_iter()
        .map(|g| {
            let inv_cov = spd_inverse(&g.covariance)?;
            let log_det = g.covariance.determinant().ln();
            log_det.is_finite().then_some(GaussianTerms { inv_cov, log_det })
        })
        .collect()
}

/// A point that passed both gates, with its neighborhood in the map.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedPoint {
    /// Pixel index in the aligned prediction.
    pub pixel: usize,
    /// Map indices of the nearest Gaussians by Euclidean mean distance.
    pub neighbors: Vec<usize>,
    /// Non-squared Mahalanobis distance to each neighbor.
    pub mahalanobis: Vec<f64>,
    /// `n̄_k · n` for each neighbor.
    pub normal_agreement: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Gating {
    pub passed: Vec<GatedPoint>,
    /// Valid pixels that failed a gate.
    pub rejected: Vec<usize>,
}

/// Splits the valid points of `aligned` into those explained by nearby
/// Gaussians and those that are not.
///
/// A point passes when the mean normal agreement over its `K` nearest
/// Gaussians is at least `tau_n` and its smallest Mahalanobis distance is at
/// most `tau_sigma`. `candidates` restricts the search to a subset of the
/// map; `None` searches everything.
pub fn gate_points(
    aligned: &Prediction,
    map: &GaussianMap,
    candidates: Option<&[usize]>,
    config: &Config,
) -> Gating {
    let valid = aligned.valid_indices();
    let ids: Vec<usize> = match candidates {
        Some(c) => c.to_vec(),
        None => (0..map.len()).collect(),
    };
    if ids.is_empty() {
        return Gating {
            passed: Vec::new(),
            rejected: valid,
        };
    }
    let terms = gaussian_terms(map);
    let means: Vec<Vector3<f64>> = ids.iter().map(|&i| map.get(i).mean).collect();
    let tree = KdTree::new(&means);
    let k = config.k.min(ids.len());

    let verdicts: Vec<Option<GatedPoint>> = valid
        .par_iter()
        .map(|&px| {
            let x = aligned.points[px];
            let n = aligned.normals[px];
            let mut neighbors = Vec::with_capacity(k);
            let mut dist = Vec::with_capacity(k);
            let mut agree = Vec::with_capacity(k);
            for (j, _) in tree.knn(&x, k) {
                let gi = ids[j];
                let g = map.get(gi);
                let d = match &terms[gi] {
                    Some(t) => mahalanobis(&x, &g.mean, &t.inv_cov),
                    None => f64::INFINITY,
                };
                neighbors.push(gi);
                dist.push(d);
                agree.push(g.normal.dot(&n));
            }
            let mean_agree = agree.iter().sum::<f64>() / agree.len() as f64;
            let min_dist = dist.iter().copied().fold(f64::INFINITY, f64::min);
            (mean_agree >= config.tau_n && min_dist <= config.tau_sigma).then_some(GatedPoint {
                pixel: px,
                neighbors,
                mahalanobis: dist,
                normal_agreement: agree,
            })
        })
        .collect();

    let mut gating = Gating::default();
    for (px, v) in valid.into_iter().zip(verdicts) {
        match v {
            Some(p) => gating.passed.push(p),
            None => gating.rejected.push(px),
        }
    }
    gating
}

/// `−½d² − log|Σ| + κ₁(d_n − 1) + κ₂(d_cos − 1)`.
pub fn log_likelihood(d_sigma: f64, log_det: f64, d_n: f64, d_cos: f64, kappa_1: f64, kappa_2: f64) -> f64 {
    -0.5 * d_sigma * d_sigma - log_det + kappa_1 * (d_n - 1.0) + kappa_2 * (d_cos - 1.0)
}

/// Numerically stable softmax.
pub fn softmax(p: &[f64]) -> Vec<f64> {
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = p.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointAssignment {
    pub pixel: usize,
    pub neighbors: Vec<usize>,
    pub mahalanobis: Vec<f64>,
    pub normal_agreement: Vec<f64>,
    pub feature_cosine: Vec<f64>,
    pub log_likelihood: Vec<f64>,
    /// Softmax of `log_likelihood`; non-negative, sums to one.
    pub responsibilities: Vec<f64>,
    /// Best log-likelihood minus the best volume term among the neighbors.
    pub pi: f64,
    /// `|pi| ≤ tau_pi`.
    pub integrate: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GatedAssignment {
    pub points: Vec<PointAssignment>,
    /// Gated points whose likelihood was not finite.
    pub dropped: Vec<usize>,
}

/// Soft assignment of gated points to their neighboring Gaussians.
pub fn responsibilities(
    aligned: &Prediction,
    gating: &Gating,
    map: &GaussianMap,
    config: &Config,
) -> Result<GatedAssignment> {
    if !gating.passed.is_empty() && aligned.feature_dim != map.feature_dim() {
        return Err(Error::InvalidInput(format!(
            "prediction features have dimension {}, map has {}",
            aligned.feature_dim,
            map.feature_dim()
        )));
    }
    let terms = gaussian_terms(map);
    let rows: Vec<std::result::Result<PointAssignment, usize>> = gating
        .passed
        .par_iter()
        .map(|gp| {
            let f = aligned.feature(gp.pixel);
            let mut feature_cosine = Vec::with_capacity(gp.neighbors.len());
            let mut p = Vec::with_capacity(gp.neighbors.len());
            let mut best_det = f64::NEG_INFINITY;
            for (slot, &gi) in gp.neighbors.iter().enumerate() {
                let d_cos = cosine(&map.get(gi).feature, f);
                let p_det = terms[gi].map_or(f64::NAN, |t| -t.log_det);
                feature_cosine.push(d_cos);
                p.push(log_likelihood(
                    gp.mahalanobis[slot],
                    -p_det,
                    gp.normal_agreement[slot],
                    d_cos,
                    config.kappa_1,
                    config.kappa_2,
                ));
                best_det = best_det.max(p_det);
            }
            if p.iter().any(|v| !v.is_finite()) || !best_det.is_finite() {
                log::debug!("pixel {}: non-finite likelihood, dropping", gp.pixel);
                return Err(gp.pixel);
            }
            let best = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let pi = best - best_det;
            Ok(PointAssignment {
                pixel: gp.pixel,
                neighbors: gp.neighbors.clone(),
                mahalanobis: gp.mahalanobis.clone(),
                normal_agreement: gp.normal_agreement.clone(),
                feature_cosine,
                responsibilities: softmax(&p),
                log_likelihood: p,
                pi,
                integrate: pi.abs() <= config.tau_pi,
            })
        })
        .collect();
    let mut out = GatedAssignment::default();
    for r in rows {
        match r {
            Ok(a) => out.points.push(a),
            Err(px) => out.dropped.push(px),
        }
    }
    Ok(out)
}

/// The two eigenvectors of `Σ` least aligned with the Gaussian's normal.
pub fn tangential_axes(g: &Gaussian) -> [Vector3<f64>; 2] {
    let (_, vecs) = sorted_eigen(&g.covariance);
    let mut cols: Vec<Vector3<f64>> = (0..3).map(|i| vecs.column(i).into_owned()).collect();
    cols.sort_by(|a, b| a.dot(&g.normal).abs().total_cmp(&b.dot(&g.normal).abs()));
    [cols[0], cols[1]]
}

/// How evenly responsibility mass straddles the Gaussian along its two
/// tangential axes, in `[delta_min, 1]`.
///
/// Per axis the score is `2·min(Σ₊ r̂, Σ₋ r̂)` with responsibilities
/// normalized over the given points; a point exactly on the axis splits its
/// mass evenly. The smaller of the two axis scores is returned.
pub fn isotropy_score(g: &Gaussian, points: &[Vector3<f64>], resp: &[f64], delta_min: f64) -> f64 {
    let total: f64 = resp.iter().sum();
    if !(total > 0.0) {
        return delta_min;
    }
    let score = tangential_axes(g)
        .iter()
        .map(|axis| {
            let (mut pos, mut neg) = (0.0, 0.0);
            for (x, &r) in points.iter().zip(resp) {
                let s = (x - g.mean).dot(axis);
                if s > 0.0 {
                    pos += r;
                } else if s < 0.0 {
                    neg += r;
                } else {
                    pos += 0.5 * r;
                    neg += 0.5 * r;
                }
            }
            2.0 * (pos / total).min(neg / total)
        })
        .fold(f64::INFINITY, f64::min);
    score.clamp(delta_min, 1.0)
}

/// Running-average weight `δ / (α_prev + δ)`.
pub fn blend_alpha(previous: f64, delta: f64) -> f64 {
    delta / (previous + delta)
}

/// Fixed point of [`blend_alpha`] for constant `delta`.
pub fn blend_fixed_point(delta: f64) -> f64 {
    (-delta + (delta * delta + 4.0 * delta).sqrt()) * 0.5
}

#[derive(Debug, Clone, Default)]
pub struct EmReport {
    /// Map indices that received an M-step, ascending.
    pub updated: Vec<usize>,
    /// Isotropy score used for each entry of `updated`.
    pub deltas: Vec<f64>,
    /// Gated pixels that failed the explanation test, for the refinement stage.
    pub leftovers: Vec<usize>,
    /// Points whose responsibilities entered an M-step.
    pub integrated: usize,
}

struct Accumulated {
    weight: f64,
    points: Vec<Vector3<f64>>,
    colors: Vec<Vector3<f64>>,
    normals: Vec<Vector3<f64>>,
    resp: Vec<f64>,
}

/// New parameters of `g` from its weighted points, blended into `g`.
fn m_step(g: &Gaussian, acc: &Accumulated, delta: f64, floor: f64) -> Gaussian {
    let w = acc.weight;
    let mean = acc.points.iter().zip(&acc.resp).map(|(x, &r)| x * r).sum::<Vector3<f64>>() / w;
    let cov = acc
        .points
        .iter()
        .zip(&acc.resp)
        .map(|(x, &r)| {
            let d = x - mean;
            d * d.transpose() * r
        })
        .sum::<Matrix3<f64>>()
        / w;
    let (cov, _) = floor_covariance(&cov, floor);
    let color = acc.colors.iter().zip(&acc.resp).map(|(c, &r)| c * r).sum::<Vector3<f64>>() / w;
    let nsum = acc
        .normals
        .iter()
        .zip(&acc.resp)
        .map(|(n, &r)| if n.dot(&g.normal) < 0.0 { -n * r } else { n * r })
        .sum::<Vector3<f64>>();
    let normal = if nsum.norm() > 0.0 { nsum.normalize() } else { g.normal };

    let alpha = blend_alpha(g.blend_state, delta);
    let mix = |old: f64, new: f64| (1.0 - alpha) * old + alpha * new;
    let blended_normal = g.normal.zip_map(&normal, mix);
    let (covariance, _) = floor_covariance(&g.covariance.zip_map(&cov, mix), floor);
    Gaussian {
        mean: g.mean.zip_map(&mean, mix),
        covariance,
        color: g.color.zip_map(&color, mix).map(|c| c.clamp(0.0, 1.0)),
        normal: if blended_normal.norm() > 0.0 {
            blended_normal.normalize()
        } else {
            g.normal
        },
        feature: g.feature.clone(),
        blend_state: alpha,
    }
}

/// One M-step per Gaussian from the integrable points of `assignment`.
///
/// Statistics are gathered in point order, so the result does not depend on
/// thread scheduling.
pub fn em_update(
    map: &mut GaussianMap,
    aligned: &Prediction,
    assignment: &GatedAssignment,
    config: &Config,
) -> EmReport {
    let mut report = EmReport::default();
    let mut acc: std::collections::BTreeMap<usize, Accumulated> = Default::default();
    for pa in &assignment.points {
        if !pa.integrate {
            report.leftovers.push(pa.pixel);
            continue;
        }
        report.integrated += 1;
        for (&gi, &r) in pa.neighbors.iter().zip(&pa.responsibilities) {
            let a = acc.entry(gi).or_insert_with(|| Accumulated {
                weight: 0.0,
                points: Vec::new(),
                colors: Vec::new(),
                normals: Vec::new(),
                resp: Vec::new(),
            });
            a.weight += r;
            a.points.push(aligned.points[pa.pixel]);
            a.colors.push(aligned.colors[pa.pixel]);
            a.normals.push(aligned.normals[pa.pixel]);
            a.resp.push(r);
        }
    }
    let floor = map.covariance_floor();
    let jobs: Vec<(usize, Accumulated)> = acc
        .into_iter()
        .filter(|(_, a)| a.weight >= config.responsibility_min)
        .collect();
    let updates: Vec<(usize, f64, Gaussian)> = jobs
        .par_iter()
        .map(|(gi, a)| {
            let g = map.get(*gi);
            let delta = isotropy_score(g, &a.points, &a.resp, config.delta_min);
            (*gi, delta, m_step(g, a, delta, floor))
        })
        .collect();
    for (gi, delta, g) in updates {
        map.set(gi, g);
        report.updated.push(gi);
        report.deltas.push(delta);
    }
    report
}

/// Gating, responsibilities and the M-step in one call.
#[derive(Debug, Clone, Default)]
pub struct Integration {
    pub report: EmReport,
    /// Pixels left for the refinement stage: gate failures, dropped points
    /// and leftovers, ascending.
    pub unexplained: Vec<usize>,
}

pub fn integrate(
    map: &mut GaussianMap,
    aligned: &Prediction,
    candidates: Option<&[usize]>,
    config: &Config,
) -> Result<Integration> {
    let gating = gate_points(aligned, map, candidates, config);
    let assignment = responsibilities(aligned, &gating, map, config)?;
    let report = em_update(map, aligned, &assignment, config);
    let mut unexplained: Vec<usize> = gating
        .rejected
        .iter()
        .chain(&assignment.dropped)
        .chain(&report.leftovers)
        .copied()
        .collect();
    unexplained.sort_unstable();
    log::debug!(
        "em: {} gated, {} integrated, {} unexplained, {} Gaussians updated",
        gating.passed.len(),
        report.integrated,
        unexplained.len(),
        report.updated.len()
    );
    Ok(Integration { report, unexplained })
}
