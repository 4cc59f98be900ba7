//! Small dense linear-algebra helpers shared by the mapping stages.

use nalgebra::{Matrix2, Matrix3, Rotation3, SymmetricEigen, UnitQuaternion, Vector3};

/// Symmetrizes `m` and clamps every eigenvalue below `floor` up to `floor`.
///
/// Returns the floored matrix and whether any eigenvalue had to be raised.
pub fn floor_covariance(m: &Matrix3<f64>, floor: f64) -> (Matrix3<f64>, bool) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return (sym, false);
    }
    let clamped = eig.eigenvalues.map(|l| if l.is_finite() { l.max(floor) } else { floor });
    let rebuilt = eig.eigenvectors * Matrix3::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    (symmetrize(&rebuilt), true)
}

pub fn symmetrize(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric 3x3 matrix in ascending order with matching
/// eigenvector columns.
pub fn sorted_eigen(m: &Matrix3<f64>) -> ([f64; 3], Matrix3<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.map(|i| eig.eigenvalues[i]);
    let vectors = Matrix3::from_columns(&order.map(|i| eig.eigenvectors.column(i).into_owned()));
    (values, vectors)
}

/// Non-squared Mahalanobis distance of `x` from `mean` under `inv_cov`.
pub fn mahalanobis(x: &Vector3<f64>, mean: &Vector3<f64>, inv_cov: &Matrix3<f64>) -> f64 {
    let d = x - mean;
    d.dot(&(inv_cov * d)).max(0.0).sqrt()
}

/// Inverse of an SPD 3x3 matrix via Cholesky, falling back to the general inverse.
pub fn spd_inverse(m: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    match m.cholesky() {
        Some(ch) => Some(ch.inverse()),
        None => m.try_inverse(),
    }
}

/// Symmetrizes a 2x2 matrix and clamps its eigenvalues from below.
pub fn floor_covariance_2d(m: &Matrix2<f64>, floor: f64) -> Matrix2<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|l| if l.is_finite() { l.max(floor) } else { floor });
    let r = eig.eigenvectors * Matrix2::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    (r + r.transpose()) * 0.5
}

/// Projects an arbitrary 3x3 matrix onto SO(3).
pub fn closest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Re-orthonormalizes a rotation that has accumulated rounding error.
pub fn renormalize_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
    q.to_rotation_matrix().into_inner()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either vector vanishes.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = norm(a) * norm(b);
    if n > 0.0 {
        dot(a, b) / n
    } else {
        0.0
    }
}
