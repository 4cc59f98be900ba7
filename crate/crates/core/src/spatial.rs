//! Static k-d tree for exact nearest-neighbor queries on 3D points.

use nalgebra::Vector3;

const LEAF_SIZE: usize = 8;

/// Balanced, implicit k-d tree. Queries return original point indices;
/// ties in distance are broken by the lower index so results are
/// deterministic.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    perm: Vec<usize>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vector3<f64>]) -> Self {
        let pts: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut tree = KdTree {
            perm: (0..pts.len()).collect(),
            axes: vec![0; pts.len()],
            points: pts,
        };
        let n = tree.points.len();
        tree.build(0, n);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Vector3<f64> {
        let p = self.points[i];
        Vector3::new(p[0], p[1], p[2])
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= LEAF_SIZE {
            return;
        }
        let axis = self.widest_axis(lo, hi);
        let mid = (lo + hi) / 2;
        let points = &self.points;
        self.perm[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a][axis]
                .total_cmp(&points[b][axis])
                .then(a.cmp(&b))
        });
        self.axes[mid] = axis as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    fn widest_axis(&self, lo: usize, hi: usize) -> usize {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for &i in &self.perm[lo..hi] {
            for a in 0..3 {
                min[a] = min[a].min(self.points[i][a]);
                max[a] = max[a].max(self.points[i][a]);
            }
        }
        (0..3)
            .max_by(|&a, &b| (max[a] - min[a]).total_cmp(&(max[b] - min[b])))
            .unwrap_or(0)
    }

    /// Nearest point as `(index, squared distance)`.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        self.knn(q, 1).into_iter().next()
    }

    /// The `k` nearest points, closest first, as `(index, squared distance)`.
    pub fn knn(&self, q: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let q = [q.x, q.y, q.z];
        self.search(0, self.points.len(), &q, k, &mut best);
        best.into_iter().map(|(d, i)| (i, d)).collect()
    }

    /// Every point within `radius`, sorted by distance.
    pub fn within(&self, q: &Vector3<f64>, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        let q = [q.x, q.y, q.z];
        self.range(0, self.points.len(), &q, radius * radius, &mut out);
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn consider(&self, i: usize, q: &[f64; 3], k: usize, best: &mut Vec<(f64, usize)>) {
        let p = self.points[i];
        let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
        if best.len() == k {
            let worst = best[k - 1];
            if d > worst.0 || (d == worst.0 && i > worst.1) {
                return;
            }
        }
        let pos = best
            .partition_point(|&(bd, bi)| bd < d || (bd == d && bi < i));
        best.insert(pos, (d, i));
        best.truncate(k);
    }

    fn search(&self, lo: usize, hi: usize, q: &[f64; 3], k: usize, best: &mut Vec<(f64, usize)>) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.perm[lo..hi] {
                self.consider(i, q, k, best);
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let axis = self.axes[mid] as usize;
        let pivot = self.perm[mid];
        let diff = q[axis] - self.points[pivot][axis];
        let (near, far) = if diff <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, q, k, best);
        self.consider(pivot, q, k, best);
        if best.len() < k || diff * diff <= best[best.len() - 1].0 {
            self.search(far.0, far.1, q, k, best);
        }
    }

    fn range(&self, lo: usize, hi: usize, q: &[f64; 3], r2: f64, out: &mut Vec<(usize, f64)>) {
        let check = |i: usize, out: &mut Vec<(usize, f64)>| {
            let p = self.points[i];
            let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            if d <= r2 {
                out.push((i, d));
            }
        };
        if hi - lo <= LEAF_SIZE {
            for &i in &self.perm[lo..hi] {
                check(i, out);
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let axis = self.axes[mid] as usize;
        let pivot = self.perm[mid];
        let diff = q[axis] - self.points[pivot][axis];
        check(pivot, out);
        if diff <= 0.0 || diff * diff <= r2 {
            self.range(lo, mid, q, r2, out);
        }
        if diff >= 0.0 || diff * diff <= r2 {
            self.range(mid + 1, hi, q, r2, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn brute_knn(points: &[Vector3<f64>], q: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p - q).norm_squared()))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn empty_tree_returns_nothing() {
        let t = KdTree::new(&[]);
        assert!(t.nearest(&Vector3::zeros()).is_none());
    }

    #[test]
    fn duplicate_points_break_ties_by_index() {
        let pts = vec![Vector3::new(1.0, 0.0, 0.0); 20];
        let t = KdTree::new(&pts);
        let got: Vec<usize> = t.knn(&Vector3::zeros(), 3).iter().map(|p| p.0).collect();
        assert_eq!(got, vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn knn_matches_brute_force(
            raw in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..200),
            q in (-6.0f64..6.0, -6.0f64..6.0, -6.0f64..6.0),
            k in 1usize..12,
        ) {
            let pts: Vec<Vector3<f64>> = raw.iter().map(|&(x, y, z)| Vector3::new(x, y, z)).collect();
            let q = Vector3::new(q.0, q.1, q.2);
            let tree = KdTree::new(&pts);
            prop_assert_eq!(tree.knn(&q, k), brute_knn(&pts, &q, k));
            let r = 2.0;
            let mut expect: Vec<(usize, f64)> = brute_knn(&pts, &q, pts.len())
                .into_iter().filter(|p| p.1 <= r * r).collect();
            expect.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            prop_assert_eq!(tree.within(&q, r), expect);
        }
    }
}
