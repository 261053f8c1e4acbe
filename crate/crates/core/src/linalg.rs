//! Small dense linear-algebra helpers shared by the discrete solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const EIGEN_EPS: f64 = 1e-15;
const MAX_ITER: usize = 10_000;

/// Orthonormal basis (as columns) of the orthogonal complement of the unit
/// vector `q` inside the coordinate subspace `support`.
///
/// Rows outside `support` are zero, so the basis has `support.len() - 1`
/// columns. Built from a Householder reflection that maps `q` to a multiple of
/// the first support coordinate.
pub fn complement_basis(q: &DVector<f64>, support: &[usize]) -> DMatrix<f64> {
    let n = q.len();
    let m = support.len();
    if m <= 1 {
        return DMatrix::zeros(n, 0);
    }
    let mut w = DVector::from_iterator(m, support.iter().map(|&i| q[i]));
    let alpha = if w[0] >= 0.0 { 1.0 } else { -1.0 };
    w[0] += alpha * w.norm();
    let wn2 = w.norm_squared();
    // H = I - 2 w w^T / (w^T w); columns 1..m of H span q^⊥.
    let mut basis = DMatrix::zeros(n, m - 1);
    for c in 1..m {
        for (r, &row) in support.iter().enumerate() {
            let delta = if r == c { 1.0 } else { 0.0 };
            let h = if wn2 > 0.0 {
                delta - 2.0 * w[r] * w[c] / wn2
            } else {
                delta
            };
            basis[(row, c - 1)] = h;
        }
    }
    basis
}

/// Eigen-decomposition of a symmetric matrix with eigenpairs sorted by
/// descending eigenvalue.
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::Computation("non-finite matrix entries".into()));
    }
    let n = sym.nrows();
    if n == 0 {
        return Ok((Vec::new(), DMatrix::zeros(0, 0)));
    }
    let eig = SymmetricEigen::try_new(sym, EIGEN_EPS, MAX_ITER)
        .ok_or_else(|| Error::Computation("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        vectors.set_column(c, &eig.eigenvectors.column(i));
    }
    Ok((values, vectors))
}

/// Index of the first coordinate whose magnitude exceeds a small fraction of
/// the column's largest entry.
fn leading_coordinate(v: &[f64]) -> Option<usize> {
    let amax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if amax == 0.0 {
        return None;
    }
    v.iter().position(|x| x.abs() > 1e-9 * amax)
}

/// Sign that makes the first non-negligible coordinate of `v` positive.
pub fn canonical_sign(v: &[f64]) -> f64 {
    match leading_coordinate(v) {
        Some(i) if v[i] < 0.0 => -1.0,
        _ => 1.0,
    }
}

/// Uniformly random `n × m` matrix with orthonormal columns (QR of a Gaussian
/// matrix with sign-corrected R diagonal).
pub fn random_orthonormal<R: rand::Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> DMatrix<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let g = DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..m {
        if r[(c, c)] < 0.0 {
            let mut col = q.column_mut(c);
            col.neg_mut();
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_is_orthonormal_and_orthogonal() {
        let q = DVector::from_vec(vec![0.5, 0.5, 0.5, 0.5]);
        let u = complement_basis(&q, &[0, 1, 2, 3]);
        assert_eq!(u.ncols(), 3);
        assert!((u.transpose() * &u - DMatrix::identity(3, 3)).amax() < 1e-14);
        assert!((u.transpose() * &q).amax() < 1e-14);
    }

    #[test]
    fn complement_respects_support() {
        let q = DVector::from_vec(vec![0.6, 0.0, 0.8]);
        let u = complement_basis(&q, &[0, 2]);
        assert_eq!(u.ncols(), 1);
        assert_eq!(u[(1, 0)], 0.0);
        assert!((u.column(0).dot(&q)).abs() < 1e-15);
    }

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 5.0]);
        let (vals, vecs) = sorted_symmetric_eigen(&m).unwrap();
        assert_eq!(vals, vec![5.0, 2.0, -1.0]);
        assert!((vecs.column(0).abs() - DVector::from_vec(vec![0.0, 0.0, 1.0])).amax() < 1e-14);
    }

    #[test]
    fn sign_convention() {
        assert_eq!(canonical_sign(&[0.0, -0.3, 0.2]), -1.0);
        assert_eq!(canonical_sign(&[1e-20, 0.3, -0.2]), 1.0);
        assert_eq!(canonical_sign(&[0.0, 0.0]), 1.0);
    }
}
