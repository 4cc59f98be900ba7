//! Trajectory, reconstruction and segmentation metrics.

use std::fmt::Write as _;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{umeyama, Similarity};
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::source::SurfaceSamples;
use crate::spatial::KdTree;
use crate::splat::render_map;
use crate::types::{CameraIntrinsics, Config, GaussianMap, Trajectory};

/// Default reconstruction threshold (m).
pub const F1_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct AteResult {
    pub rmse: f64,
    /// Scale of the similarity taking estimated positions onto ground truth.
    pub scale: f64,
    pub pairs: usize,
    pub alignment: Similarity,
}

/// ATE RMSE after closed-form similarity alignment of estimated camera
/// positions to ground truth, paired by frame id.
pub fn ate_rmse(estimated: &Trajectory, gt: &Trajectory) -> Result<AteResult> {
    let mut est = Vec::with_capacity(estimated.len());
    let mut reference = Vec::with_capacity(estimated.len());
    for e in estimated.entries() {
        let g = gt.get(e.frame_id).ok_or_else(|| {
            Error::TrajectoryMismatch(format!("estimated frame {} has no ground-truth pose", e.frame_id))
        })?;
        est.push(*e.pose.translation());
        reference.push(*g.pose.translation());
    }
    if est.len() < 3 {
        return Err(Error::TrajectoryMismatch(format!(
            "ATE needs at least 3 matched poses, got {}",
            est.len()
        )));
    }
    let alignment = umeyama(&est, &reference, None, true)?;
    let sq: f64 = est
        .iter()
        .zip(&reference)
        .map(|(e, g)| (alignment.apply(e) - g).norm_squared())
        .sum();
    Ok(AteResult {
        rmse: (sq / est.len() as f64).sqrt(),
        scale: alignment.scale,
        pairs: est.len(),
        alignment,
    })
}

/// `100 · min(s, 1/s)`.
pub fn scale_score(s: f64) -> f64 {
    assert!(s > 0.0, "scale must be positive");
    100.0 * s.min(1.0 / s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionMetrics {
    pub accuracy: f64,
    pub completion: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub normal_consistency: f64,
}

/// Nearest neighbor in `tree` for every query, as `(index, distance)`.
fn nearest_all(tree: &KdTree, queries: &[Vector3<f64>]) -> Vec<(usize, f64)> {
    queries
        .par_iter()
        .map(|q| {
            let (i, d2) = tree.nearest(q).expect("non-empty tree");
            (i, d2.sqrt())
        })
        .collect()
}

/// Accuracy and completion in meters; precision, recall, F1 and normal
/// consistency in percent. Normal consistency averages `|n_rec · n_gt|`
/// over mutual nearest-neighbor pairs.
pub fn reconstruction_metrics(
    rec_points: &[Vector3<f64>],
    rec_normals: &[Vector3<f64>],
    gt_points: &[Vector3<f64>],
    gt_normals: &[Vector3<f64>],
    threshold: f64,
) -> Result<ReconstructionMetrics> {
    if rec_points.is_empty() || gt_points.is_empty() {
        return Err(Error::InvalidInput("reconstruction metrics need two non-empty clouds".into()));
    }
    if rec_points.len() != rec_normals.len() || gt_points.len() != gt_normals.len() {
        return Err(Error::InvalidInput("every point needs a normal".into()));
    }
    let gt_tree = KdTree::new(gt_points);
    let rec_tree = KdTree::new(rec_points);
    let to_gt = nearest_all(&gt_tree, rec_points);
    let to_rec = nearest_all(&rec_tree, gt_points);

    let mean = |v: &[(usize, f64)]| v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64;
    let within = |v: &[(usize, f64)]| v.iter().filter(|x| x.1 < threshold).count() as f64 / v.len() as f64;
    let precision = within(&to_gt);
    let recall = within(&to_rec);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };

    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (i, &(j, _)) in to_gt.iter().enumerate() {
        if to_rec[j].0 == i {
            sum += rec_normals[i].dot(&gt_normals[j]).abs();
            pairs += 1;
        }
    }
    Ok(ReconstructionMetrics {
        accuracy: mean(&to_gt),
        completion: mean(&to_rec),
        precision: 100.0 * precision,
        recall: 100.0 * recall,
        f1: 100.0 * f1,
        normal_consistency: if pairs > 0 { 100.0 * sum / pairs as f64 } else { 0.0 },
    })
}

/// Gaussian means plus points back-projected from the map's expected depth
/// at every `stride`-th pixel of each pose. Rendered points take the normal
/// of the nearest Gaussian mean.
pub fn densify(
    map: &GaussianMap,
    trajectory: &Trajectory,
    intrinsics: &CameraIntrinsics,
    config: &Config,
    stride: usize,
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let mut points = map.means();
    let mut normals: Vec<Vector3<f64>> = map.gaussians().iter().map(|g| g.normal).collect();
    if stride == 0 || map.is_empty() {
        return (points, normals);
    }
    let tree = KdTree::new(&points);
    let base = points.len();
    for e in trajectory.entries() {
        let (_, render) = render_map(map, None, &e.pose, intrinsics, config);
        for v in (0..intrinsics.height).step_by(stride) {
            for u in (0..intrinsics.width).step_by(stride) {
                if let Some(z) = render.depth(u, v) {
                    let p = e.pose.transform_point(&intrinsics.backproject(u as f64, v as f64, z));
                    points.push(p);
                }
            }
        }
    }
    let extra: Vec<Vector3<f64>> = points[base..]
        .par_iter()
        .map(|p| normals[tree.nearest(p).expect("non-empty").0])
        .collect();
    normals.extend(extra);
    (points, normals)
}

/// Moves points and normals through a similarity, e.g. the ATE alignment,
/// so they can be compared against ground truth.
pub fn align_points(
    alignment: &Similarity,
    points: &mut [Vector3<f64>],
    normals: &mut [Vector3<f64>],
) {
    for p in points.iter_mut() {
        *p = alignment.apply(p);
    }
    for n in normals.iter_mut() {
        *n = alignment.rotation * *n;
    }
}

/// Per-Gaussian class assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub labels: Vec<usize>,
    /// Best cosine is not positive or tied with another class.
    pub low_confidence: Vec<bool>,
}

/// Tie tolerance between class cosines.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Argmax cosine between each Gaussian feature and the class embeddings;
/// ties go to the lowest class index.
pub fn segment_map(map: &GaussianMap, embeddings: &[Vec<f64>]) -> Result<Segmentation> {
    if embeddings.is_empty() {
        return Err(Error::InvalidInput("segmentation needs at least one class embedding".into()));
    }
    let (labels, low_confidence) = map
        .gaussians()
        .iter()
        .map(|g| {
            let cos: Vec<f64> = embeddings.iter().map(|e| cosine(&g.feature, e)).collect();
            let mut best = 0;
            for (c, &v) in cos.iter().enumerate().skip(1) {
                if v > cos[best] + TIE_TOLERANCE {
                    best = c;
                }
            }
            let tied = cos
                .iter()
                .enumerate()
                .any(|(c, &v)| c != best && (v - cos[best]).abs() <= TIE_TOLERANCE);
            (best, tied || cos[best] <= TIE_TOLERANCE)
        })
        .unzip();
    Ok(Segmentation { labels, low_confidence })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub miou: f64,
    pub f_miou: f64,
    pub acc: f64,
    /// Rows: ground truth class, columns: predicted class.
    pub confusion: Vec<Vec<usize>>,
}

/// Scores predicted labels at `centers` against the label of each center's
/// nearest ground-truth point. All scores in percent.
pub fn segmentation_metrics(
    centers: &[Vector3<f64>],
    predicted: &[usize],
    gt_points: &[Vector3<f64>],
    gt_labels: &[usize],
) -> Result<SegmentationMetrics> {
    if centers.is_empty() || gt_points.is_empty() {
        return Err(Error::InvalidInput("segmentation metrics need non-empty inputs".into()));
    }
    if centers.len() != predicted.len() || gt_points.len() != gt_labels.len() {
        return Err(Error::InvalidInput("every point needs a label".into()));
    }
    let tree = KdTree::new(gt_points);
    let truth: Vec<usize> = nearest_all(&tree, centers).into_iter().map(|(j, _)| gt_labels[j]).collect();
    Ok(confusion_scores(&truth, predicted))
}

/// mIoU, frequency-weighted mIoU and accuracy from paired labels. Classes
/// absent from `truth` do not enter the means.
pub fn confusion_scores(truth: &[usize], predicted: &[usize]) -> SegmentationMetrics {
    let classes = truth.iter().chain(predicted).max().map_or(0, |m| m + 1);
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[t][p] += 1;
    }
    let n = truth.len() as f64;
    let mut iou_sum = 0.0;
    let mut present = 0usize;
    let mut weighted = 0.0;
    let mut correct = 0usize;
    for c in 0..classes {
        let tp = confusion[c][c];
        correct += tp;
        let gt_c: usize = confusion[c].iter().sum();
        if gt_c == 0 {
            continue;
        }
        let pred_c: usize = confusion.iter().map(|row| row[c]).sum();
        let iou = tp as f64 / (gt_c + pred_c - tp) as f64;
        iou_sum += iou;
        present += 1;
        weighted += iou * gt_c as f64 / n;
    }
    SegmentationMetrics {
        miou: 100.0 * iou_sum / present.max(1) as f64,
        f_miou: 100.0 * weighted,
        acc: 100.0 * correct as f64 / n,
        confusion,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ate_rmse: f64,
    pub scale_score: f64,
    pub accuracy: f64,
    pub completion: f64,
    pub f1_at_0_2: f64,
    pub normal_consistency: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_miou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
}

impl MetricsReport {
    pub fn new(ate: &AteResult, rec: &ReconstructionMetrics, seg: Option<&SegmentationMetrics>) -> Self {
        Self {
            ate_rmse: ate.rmse,
            scale_score: scale_score(ate.scale),
            accuracy: rec.accuracy,
            completion: rec.completion,
            f1_at_0_2: rec.f1,
            normal_consistency: rec.normal_consistency,
            miou: seg.map(|s| s.miou),
            f_miou: seg.map(|s| s.f_miou),
            acc: seg.map(|s| s.acc),
        }
    }

    /// Range violations, empty when the report is well formed.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("ate_rmse", self.ate_rmse),
            ("accuracy", self.accuracy),
            ("completion", self.completion),
        ] {
            if !(v >= 0.0) {
                out.push(format!("{name} = {v} is negative"));
            }
        }
        let pct = [
            ("scale_score", Some(self.scale_score)),
            ("f1_at_0_2", Some(self.f1_at_0_2)),
            ("normal_consistency", Some(self.normal_consistency)),
            ("miou", self.miou),
            ("f_miou", self.f_miou),
            ("acc", self.acc),
        ];
        for (name, v) in pct {
            if let Some(v) = v {
                if !(0.0..=100.0 + 1e-9).contains(&v) {
                    out.push(format!("{name} = {v} is outside [0, 100]"));
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut row = |name: &str, v: String| writeln!(s, "{name:<22}{v:>12}").unwrap();
        row("ATE RMSE (m)", format!("{:.4}", self.ate_rmse));
        row("Scale (%)", format!("{:.1}", self.scale_score));
        row("Accuracy (m)", format!("{:.4}", self.accuracy));
        row("Completion (m)", format!("{:.4}", self.completion));
        row("F1@0.2m (%)", format!("{:.1}", self.f1_at_0_2));
        row("Normals (%)", format!("{:.1}", self.normal_consistency));
        for (name, v) in [("mIoU (%)", self.miou), ("f-mIoU (%)", self.f_miou), ("Acc (%)", self.acc)] {
            if let Some(v) = v {
                row(name, format!("{v:.1}"));
            }
        }
        s
    }
}

/// Ground truth a run is scored against.
#[derive(Debug, Clone, Copy)]
pub struct GroundTruth<'a> {
    /// Poses keyed by the same frame ids as the estimate.
    pub trajectory: &'a Trajectory,
    pub surface: &'a SurfaceSamples,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub ate: AteResult,
    pub reconstruction: ReconstructionMetrics,
    pub segmentation: Option<(Segmentation, SegmentationMetrics)>,
    pub report: MetricsReport,
}

/// Scores a run. The map is brought into the ground-truth frame with the
/// trajectory alignment before any geometric comparison. With `intrinsics`
/// the reconstruction is densified from the rendered map; otherwise only
/// Gaussian means are compared. Segmentation is scored when class
/// embeddings are given.
pub fn evaluate_run(
    map: &GaussianMap,
    trajectory: &Trajectory,
    gt: GroundTruth<'_>,
    intrinsics: Option<&CameraIntrinsics>,
    config: &Config,
    embeddings: Option<&[Vec<f64>]>,
) -> Result<Evaluation> {
    if map.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty map".into()));
    }
    let ate = ate_rmse(trajectory, gt.trajectory)?;
    let (mut points, mut normals) = match intrinsics {
        Some(k) => densify(map, trajectory, k, config, config.densify_stride),
        None => (map.means(), map.gaussians().iter().map(|g| g.normal).collect()),
    };
    align_points(&ate.alignment, &mut points, &mut normals);
    let reconstruction =
        reconstruction_metrics(&points, &normals, &gt.surface.points, &gt.surface.normals, F1_THRESHOLD)?;
    let segmentation = match embeddings {
        Some(e) => {
            let seg = segment_map(map, e)?;
            let mut centers = map.means();
            align_points(&ate.alignment, &mut centers, &mut []);
            let metrics = segmentation_metrics(&centers, &seg.labels, &gt.surface.points, &gt.surface.labels)?;
            Some((seg, metrics))
        }
        None => None,
    };
    let report = MetricsReport::new(&ate, &reconstruction, segmentation.as_ref().map(|s| &s.1));
    Ok(Evaluation {
        ate,
        reconstruction,
        segmentation,
        report,
    })
}
