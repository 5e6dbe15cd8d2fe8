//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

/// Eigen-decomposition of the pencil `H e = λ G e` for symmetric `H` and
/// symmetric positive definite `G`.
///
/// Eigenvalues come back ascending (negative ones first) and the columns of
/// the returned matrix are `G`-orthonormal. Returns `None` if `G` is not
/// positive definite.
pub fn generalized_symmetric_eigen(
    h: &DMatrix<f64>,
    g: &DMatrix<f64>,
) -> Option<(Vec<f64>, DMatrix<f64>)> {
    let n = h.nrows();
    let chol = g.clone().cholesky()?;
    let l = chol.l();
    let l_inv = l.clone().try_inverse()?;
    let a = &l_inv * h * l_inv.transpose();
    let a = (&a + a.transpose()) * 0.5;
    let eig = a.symmetric_eigen();
    let argmax = |i: usize| {
        eig.eigenvectors
            .column(i)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map_or(0, |(k, _)| k)
    };
    let mut order: Vec<usize> = (0..n).collect();
    // Ties within an eigenspace are broken by the dominant coordinate so that
    // diagonal input yields the identity frame.
    order.sort_by(|&i, &j| {
        let (a, b) = (eig.eigenvalues[i], eig.eigenvalues[j]);
        if (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs())) {
            argmax(i).cmp(&argmax(j))
        } else {
            a.total_cmp(&b)
        }
    });
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let lt_inv = l_inv.transpose();
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        let mut v = &lt_inv * eig.eigenvectors.column(i);
        // Deterministic orientation: the largest entry is positive.
        let (imax, _) = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap_or((0, &0.0));
        if v[imax] < 0.0 {
            v = -v;
        }
        vectors.set_column(col, &v);
    }
    Some((values, vectors))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Ratio of largest to smallest singular value; `inf` for rank-deficient input.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Smallest singular value of `m` (0 for an empty matrix).
pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Least-squares coefficients `c` with `basis * c ≈ target`.
pub fn least_squares(basis: &DMatrix<f64>, target: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let svd = basis.clone().svd(true, true);
    svd.solve(target, 1e-14).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generalized_eigen_is_g_orthonormal() {
        let h = DMatrix::from_row_slice(2, 2, &[-2.0, 0.3, 0.3, 1.0]);
        let g = DMatrix::from_row_slice(2, 2, &[9.0, 0.5, 0.5, 1.0]);
        let (vals, vecs) = generalized_symmetric_eigen(&h, &g).unwrap();
        assert!(vals[0] < 0.0 && vals[1] > 0.0);
        let gram = vecs.transpose() * &g * &vecs;
        assert!((gram - DMatrix::identity(2, 2)).norm() < 1e-12);
        for j in 0..2 {
            let r = &h * vecs.column(j) - &g * vecs.column(j) * vals[j];
            assert!(r.norm() < 1e-12);
        }
    }

    #[test]
    fn condition_of_singular_matrix_is_infinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(condition_number(&m) > 1e12);
    }
}
