//! Map initialization: k-means over predicted points and the
//! neighborhood-to-Gaussian parameterization reused by refinement.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{floor_covariance, mahalanobis, spd_inverse};
use crate::spatial::KdTree;
use crate::types::{Config, Gaussian, GaussianMap, Prediction};

/// Centroid motion below which Lloyd iterations stop (m).
pub const KMEANS_TOLERANCE: f64 = 1e-6;

/// Number of clusters for `total_points` gathered from `frames` frames.
pub fn choose_k(total_points: usize, frames: usize, lambda: f64) -> usize {
    let denom = lambda * frames.max(1) as f64;
    ((total_points as f64 / denom).floor() as usize).max(1)
}

#[derive(Debug, Clone)]
pub struct ClusterResult {
    pub centroids: Vec<Vector3<f64>>,
    /// Cluster index of every input point.
    pub assignment: Vec<usize>,
    pub iterations: usize,
    /// Sum of squared distances to the assigned centroid after each iteration.
    pub objective: Vec<f64>,
}

/// Lloyd's k-means with k-means++ seeding. Deterministic for a fixed seed and
/// never returns an empty cluster.
pub fn kmeans(points: &[Vector3<f64>], k: usize, seed: u64, max_iterations: usize) -> Result<ClusterResult> {
    let n = points.len();
    if k == 0 {
        return Err(Error::InvalidInput("k-means needs k >= 1".into()));
    }
    if n < k {
        return Err(Error::TooFewPoints { n, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(points, k, &mut rng);
    let mut assignment = vec![0usize; n];
    let mut objective = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iterations.max(1) {
        iterations += 1;
        let tree = KdTree::new(&centroids);
        let nearest: Vec<(usize, f64)> = points
            .par_iter()
            .map(|p| tree.nearest(p).expect("k >= 1"))
            .collect();
        let mut dist2: Vec<f64> = Vec::with_capacity(n);
        for (i, (c, d)) in nearest.into_iter().enumerate() {
            assignment[i] = c;
            dist2.push(d);
        }
        fill_empty_clusters(points, &centroids, &mut assignment, &mut dist2, k);

        let updated = cluster_means(points, &assignment, k);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        centroids = updated;
        objective.push(sse(points, &assignment, &centroids));
        if shift < KMEANS_TOLERANCE {
            break;
        }
    }

    Ok(ClusterResult {
        centroids,
        assignment,
        iterations,
        objective,
    })
}

fn seed_plus_plus(points: &[Vector3<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first]];
    let mut d2: Vec<f64> = points.iter().map(|p| (p - points[first]).norm_squared()).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
            pick.expect("positive total implies a candidate")
        } else {
            // All remaining points coincide with a centroid: take any unused one.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        let c = points[next];
        centroids.push(c);
        d2.par_iter_mut()
            .zip(points.par_iter())
            .for_each(|(d, p)| *d = d.min((p - c).norm_squared()));
    }
    centroids
}

/// Moves the farthest point of a multi-point cluster into every empty cluster.
fn fill_empty_clusters(
    points: &[Vector3<f64>],
    centroids: &[Vector3<f64>],
    assignment: &mut [usize],
    dist2: &mut [f64],
    k: usize,
) {
    let mut counts = vec![0usize; k];
    for &a in assignment.iter() {
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let donor = (0..points.len())
            .filter(|&i| counts[assignment[i]] > 1)
            .max_by(|&a, &b| dist2[a].total_cmp(&dist2[b]).then(b.cmp(&a)));
        let Some(i) = donor else { break };
        counts[assignment[i]] -= 1;
        counts[c] += 1;
        assignment[i] = c;
        dist2[i] = (points[i] - centroids[c]).norm_squared();
    }
}

fn cluster_means(points: &[Vector3<f64>], assignment: &[usize], k: usize) -> Vec<Vector3<f64>> {
    let mut sums = vec![Vector3::zeros(); k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        sums[a] += p;
        counts[a] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { *s })
        .collect()
}

fn sse(points: &[Vector3<f64>], assignment: &[usize], centroids: &[Vector3<f64>]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| (p - centroids[a]).norm_squared())
        .sum()
}

/// One measurement used to parameterize a Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub color: Vector3<f64>,
    pub feature: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct NeighborhoodGaussian {
    pub gaussian: Gaussian,
    /// Normalized kernel weight of every neighbor, in input order.
    pub weights: Vec<f64>,
    /// The raw sample covariance had an eigenvalue below the floor.
    pub degenerate: bool,
}

/// Parameterizes a Gaussian centered at `center` from its neighbors.
///
/// The covariance is the floored sample covariance of the neighbor positions.
/// Attributes are averaged with kernel weights `exp(-½·d)` of the
/// Mahalanobis distance `d` under that covariance (`d²` with
/// `squared_kernel`). The feature is copied verbatim from the neighbor best
/// aligned with the weighted mean feature.
pub fn gaussian_from_neighborhood(
    center: &Vector3<f64>,
    neighbors: &[Sample<'_>],
    covariance_floor: f64,
    squared_kernel: bool,
) -> Result<NeighborhoodGaussian> {
    let m = neighbors.len();
    if m == 0 {
        return Err(Error::InvalidInput("empty neighborhood".into()));
    }
    let mean = neighbors.iter().map(|s| s.position).sum::<Vector3<f64>>() / m as f64;
    let mut cov = Matrix3::zeros();
    for s in neighbors {
        let d = s.position - mean;
        cov += d * d.transpose();
    }
    if m > 1 {
        cov /= (m - 1) as f64;
    }
    let (covariance, degenerate) = floor_covariance(&cov, covariance_floor);
    let inv = spd_inverse(&covariance).unwrap_or_else(|| Matrix3::identity() / covariance_floor);

    let mut weights: Vec<f64> = neighbors
        .iter()
        .map(|s| {
            let d = mahalanobis(&s.position, center, &inv);
            let e = if squared_kernel { d * d } else { d };
            (-0.5 * e).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if total > 0.0 && total.is_finite() {
        weights.iter_mut().for_each(|w| *w /= total);
    } else {
        weights.iter_mut().for_each(|w| *w = 1.0 / m as f64);
    }

    let nearest = (0..m)
        .min_by(|&a, &b| {
            (neighbors[a].position - center)
                .norm_squared()
                .total_cmp(&(neighbors[b].position - center).norm_squared())
                .then(a.cmp(&b))
        })
        .expect("non-empty");
    let reference = neighbors[nearest].normal;
    let mut nsum = Vector3::zeros();
    for (s, w) in neighbors.iter().zip(&weights) {
        let n = if s.normal.dot(&reference) < 0.0 { -s.normal } else { s.normal };
        nsum += n * *w;
    }
    let normal = if nsum.norm() > 1e-12 {
        nsum.normalize()
    } else {
        reference.normalize()
    };

    let dim = neighbors[0].feature.len();
    let mut fmean = vec![0.0; dim];
    for (s, w) in neighbors.iter().zip(&weights) {
        for (acc, f) in fmean.iter_mut().zip(s.feature) {
            *acc += w * f;
        }
    }
    let best = (0..m)
        .max_by(|&a, &b| {
            let da = crate::linalg::dot(neighbors[a].feature, &fmean);
            let db = crate::linalg::dot(neighbors[b].feature, &fmean);
            da.total_cmp(&db).then(b.cmp(&a))
        })
        .expect("non-empty");
    let feature = neighbors[best].feature.to_vec();

    let color = neighbors
        .iter()
        .zip(&weights)
        .map(|(s, w)| s.color * *w)
        .sum::<Vector3<f64>>()
        .map(|c| c.clamp(0.0, 1.0));

    Ok(NeighborhoodGaussian {
        gaussian: Gaussian {
            mean: *center,
            covariance,
            color,
            normal,
            feature,
            blend_state: 1.0,
        },
        weights,
        degenerate,
    })
}

/// Flattened valid points of one or more predictions.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    pub colors: Vec<Vector3<f64>>,
    pub features: Vec<f64>,
    pub feature_dim: usize,
}

impl PointCloud {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push_pixel(&mut self, pred: &Prediction, pixel: usize) {
        self.positions.push(pred.points[pixel]);
        self.normals.push(pred.normals[pixel]);
        self.colors.push(pred.colors[pixel]);
        self.features.extend_from_slice(pred.feature(pixel));
    }

    pub fn from_predictions(preds: &[Prediction]) -> Self {
        let dim = preds.first().map_or(0, |p| p.feature_dim);
        let mut cloud = PointCloud::new(dim);
        for pred in preds {
            for i in pred.valid_indices() {
                cloud.push_pixel(pred, i);
            }
        }
        cloud
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn sample(&self, i: usize) -> Sample<'_> {
        Sample {
            position: self.positions[i],
            normal: self.normals[i],
            color: self.colors[i],
            feature: self.feature(i),
        }
    }
}

/// Clusters `cloud` into `k` groups and builds one Gaussian per centroid from
/// its `neighbors` nearest points.
pub fn gaussians_from_cloud(cloud: &PointCloud, k: usize, config: &Config, seed: u64) -> Result<Vec<Gaussian>> {
    if cloud.is_empty() {
        return Err(Error::NoValidPoints);
    }
    let k = k.min(cloud.len());
    let clusters = kmeans(&cloud.positions, k, seed, config.kmeans_max_iterations)?;
    let tree = KdTree::new(&cloud.positions);
    let m = config.neighbors_per_gaussian.min(cloud.len());
    let built: Vec<Result<NeighborhoodGaussian>> = clusters
        .centroids
        .par_iter()
        .map(|c| {
            let samples: Vec<Sample<'_>> = tree.knn(c, m).iter().map(|&(i, _)| cloud.sample(i)).collect();
            gaussian_from_neighborhood(c, &samples, config.covariance_floor, config.squared_kernel)
        })
        .collect();
    let mut out = Vec::with_capacity(built.len());
    let mut degenerate = 0;
    for g in built {
        let g = g?;
        degenerate += g.degenerate as usize;
        out.push(g.gaussian);
    }
    if degenerate > 0 {
        log::debug!("{degenerate} of {} neighborhoods had a floored covariance", out.len());
    }
    Ok(out)
}

/// Builds the initial map from predictions that share one frame.
pub fn initialize_map(predictions: &[Prediction], config: &Config) -> Result<GaussianMap> {
    if predictions.is_empty() {
        return Err(Error::InvalidInput("no predictions to initialize from".into()));
    }
    let cloud = PointCloud::from_predictions(predictions);
    if cloud.is_empty() {
        return Err(Error::NoValidPoints);
    }
    let k = choose_k(cloud.len(), predictions.len(), config.lambda);
    let gaussians = gaussians_from_cloud(&cloud, k, config, config.seed)?;
    Ok(GaussianMap::from_gaussians(
        gaussians,
        config.voxel_size,
        config.covariance_floor,
        cloud.feature_dim,
    ))
}
