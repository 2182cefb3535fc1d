//! Small dense linear-algebra helpers shared by the subspace and regression code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Below this many columns the Gram-matrix preconditioning costs more than it saves.
const PRECONDITION_MIN_COLS: usize = 24;

/// Thin SVD `x = u · diag(sigma) · vᵀ` of a matrix with at least as many rows
/// as columns, by one-sided (Hestenes) Jacobi rotations.
///
/// The columns are first rotated by the eigenvectors of `xᵀx`, which leaves
/// only the poorly resolved small-singular-value directions for the Jacobi
/// sweeps to clean up. Singular values come back sorted in non-increasing
/// order. Columns of `u` belonging to zero singular values are completed to an
/// orthonormal set.
pub fn jacobi_svd(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let (p, q) = x.shape();
    if p < q {
        return Err(Error::InvalidInput(format!("jacobi_svd needs rows >= cols, got {p}x{q}")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SVD input"));
    }
    let mut v = if q >= PRECONDITION_MIN_COLS {
        gram_eigenvectors(&x.tr_mul(x)).unwrap_or_else(|| DMatrix::identity(q, q))
    } else {
        DMatrix::identity(q, q)
    };
    let mut w = x * &v;
    let tol = 2.0 * f64::EPSILON * (p as f64).sqrt();
    let mut converged = q < 2;
    let mut dirty = vec![false; q];
    for _sweep in 0..60 {
        if converged {
            break;
        }
        let gram = w.tr_mul(&w);
        dirty.iter_mut().for_each(|d| *d = false);
        let mut rotated = false;
        for i in 0..q.saturating_sub(1) {
            for j in (i + 1)..q {
                let (alpha, beta, gamma) = if dirty[i] || dirty[j] {
                    column_moments(&w, i, j)
                } else {
                    (gram[(i, i)], gram[(j, j)], gram[(i, j)])
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                dirty[i] = true;
                dirty[j] = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta == 0.0 {
                    1.0
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut w, i, j, c, s);
                rotate_columns(&mut v, i, j, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::NumericFailure("Jacobi SVD did not converge".into()));
    }
    let norms: Vec<f64> = w.column_iter().map(|c| c.norm()).collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let sigma = DVector::from_iterator(q, order.iter().map(|&i| norms[i]));
    let v_sorted = DMatrix::from_fn(q, q, |r, c| v[(r, order[c])]);
    let max = sigma.iter().cloned().fold(0.0, f64::max);
    let nonzero = sigma.iter().take_while(|&&s| s > 1e-300 && s > 1e-14 * max).count();
    let mut u = DMatrix::zeros(p, q);
    for (c, &i) in order.iter().take(nonzero).enumerate() {
        u.set_column(c, &(w.column(i) / norms[i]));
    }
    if nonzero < q {
        let head = u.columns(0, nonzero).into_owned();
        let fill = orthonormal_complement(&head, &DMatrix::identity(p, p), 1e-8);
        u.columns_mut(nonzero, q - nonzero).copy_from(&fill.columns(0, q - nonzero));
    }
    Ok((u, sigma, v_sorted))
}

/// Eigenvectors of a symmetric matrix ordered by decreasing eigenvalue.
fn gram_eigenvectors(gram: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::try_new(gram.clone(), f64::EPSILON, 10_000)?;
    let n = gram.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Some(DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]))
}

fn column_moments(m: &DMatrix<f64>, i: usize, j: usize) -> (f64, f64, f64) {
    let rows = m.nrows();
    let data = m.as_slice();
    let ci = &data[i * rows..(i + 1) * rows];
    let cj = &data[j * rows..(j + 1) * rows];
    let (mut a, mut b, mut g) = (0.0, 0.0, 0.0);
    for (x, y) in ci.iter().zip(cj) {
        a += x * x;
        b += y * y;
        g += x * y;
    }
    (a, b, g)
}

fn rotate_columns(m: &mut DMatrix<f64>, i: usize, j: usize, c: f64, s: f64) {
    debug_assert!(i < j);
    let rows = m.nrows();
    let (head, tail) = m.as_mut_slice().split_at_mut(j * rows);
    let ci = &mut head[i * rows..(i + 1) * rows];
    let cj = &mut tail[..rows];
    for (a, b) in ci.iter_mut().zip(cj.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Left singular vectors and singular values, sorted non-increasing.
///
/// Returns `(u, sigma)` with `min(rows, cols)` columns. The matrix is first
/// reduced to a square triangular factor by Householder QR so the Jacobi
/// sweeps run on the small dimension only.
pub fn sorted_svd_left(m: DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (rows, cols) = m.shape();
    if cols == 0 || rows == 0 {
        return Ok((DMatrix::zeros(rows, 0), DVector::zeros(0)));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("SVD input"));
    }
    if rows >= cols {
        if rows == cols {
            let (u, s, _) = jacobi_svd(&m)?;
            return Ok((u, s));
        }
        let qr = m.qr();
        let (q, r) = (qr.q(), qr.r());
        let (u_r, s, _) = jacobi_svd(&r)?;
        Ok((q * u_r, s))
    } else {
        // m = (Q R)ᵀ = Rᵀ Qᵀ, so the left factor of m is the left factor of Rᵀ.
        let r = m.transpose().qr().r();
        let (u, s, _) = jacobi_svd(&r.transpose())?;
        Ok((u, s))
    }
}

/// Flip column signs so the largest-magnitude entry of each column is positive.
pub fn canonicalize_signs(basis: &mut DMatrix<f64>) {
    for mut col in basis.column_iter_mut() {
        let mut best = 0.0f64;
        for &v in col.iter() {
            if v.abs() > best.abs() {
                best = v;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

/// Orthonormalize `cols` against the orthonormal `basis` and against each other.
///
/// Classical Gram-Schmidt with one re-orthogonalization pass. A column is
/// dropped when its residual norm falls below `drop_tol` times its original
/// norm (it already lies in the span).
pub fn orthonormal_complement(basis: &DMatrix<f64>, cols: &DMatrix<f64>, drop_tol: f64) -> DMatrix<f64> {
    let d = cols.nrows();
    let mut kept: Vec<DVector<f64>> = Vec::new();
    for j in 0..cols.ncols() {
        let original = cols.column(j).into_owned();
        let norm0 = original.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = original;
        for _pass in 0..2 {
            if basis.ncols() > 0 {
                let coeffs = basis.tr_mul(&v);
                v -= basis * coeffs;
            }
            for q in &kept {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm > drop_tol * norm0 && norm > f64::MIN_POSITIVE {
            kept.push(v / norm);
        }
    }
    let mut out = DMatrix::zeros(d, kept.len());
    for (j, q) in kept.iter().enumerate() {
        out.set_column(j, q);
    }
    out
}

/// Sines of the principal angles between the column spans of two
/// column-orthonormal matrices, largest first.
///
/// Uses the residual `B - A Aᵀ B`, which stays accurate for tiny angles where
/// an arccos of the cosines would lose half the digits. When the spans have
/// different dimensions, the smaller one is measured against the larger one.
pub fn principal_angle_sines(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    let (big, small) = if a.ncols() >= b.ncols() { (a, b) } else { (b, a) };
    if small.ncols() == 0 {
        return Ok(Vec::new());
    }
    let resid = small - big * big.tr_mul(small);
    let (_, sigma) = sorted_svd_left(resid)?;
    Ok(sigma.iter().map(|v| v.min(1.0)).collect())
}

/// Orthogonal polar factor of a square matrix: the rotation closest to `m` in
/// Frobenius norm.
pub fn polar_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidInput("polar factor needs a square matrix".into()));
    }
    let (u, _, v) = jacobi_svd(m)?;
    Ok(u * v.transpose())
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NumericFailure("matrix is not positive definite".into()))?;
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Ratio of largest to smallest eigenvalue of a symmetric matrix.
/// Returns infinity when the smallest eigenvalue is not positive.
pub fn spd_condition(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Closed-form ridge solution `[XᵀX + λI]⁻¹ XᵀY` together with the cached
/// inverse `[XᵀX + λI]⁻¹`.
pub fn ridge_solve(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("ridge strength must be positive, got {lambda}")));
    }
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch {
            context: "ridge targets",
            expected: x.nrows(),
            found: y.nrows(),
        });
    }
    let mut gram = x.tr_mul(x);
    for i in 0..gram.nrows() {
        gram[(i, i)] += lambda;
    }
    let inverse = spd_inverse(&gram)?;
    let solution = &inverse * x.tr_mul(y);
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("ridge solution is not finite".into()));
    }
    Ok((solution, inverse))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_of_rank_one_tall_matrix() {
        let c = DMatrix::from_column_slice(4, 2, &[1.0, -2.0, 0.5, 3.0, -1.0, 2.0, -0.5, -3.0]);
        let (u, s) = sorted_svd_left(c.clone()).unwrap();
        assert!((s[0] - c.norm()).abs() < 1e-12);
        assert!(s[1].abs() < 1e-12);
        assert!((u.column(0).dot(&c.column(0)).abs() - c.column(0).norm()).abs() < 1e-12);
    }

    /// Oracle: eigenvalues of the Gram matrix are the squared singular values.
    #[test]
    fn jacobi_matches_gram_eigenvalues() {
        let x = DMatrix::from_fn(7, 4, |r, c| ((r * 5 + c * 3) % 11) as f64 - 4.0 + 0.1 * (r * c) as f64);
        let (u, s, v) = jacobi_svd(&x).unwrap();
        let mut eig: Vec<f64> = SymmetricEigen::new(x.tr_mul(&x)).eigenvalues.iter().cloned().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for (k, e) in eig.iter().enumerate() {
            assert!((s[k] * s[k] - e).abs() < 1e-9 * eig[0]);
        }
        let back = &u * DMatrix::from_diagonal(&s) * v.transpose();
        assert!((back - &x).amax() < 1e-12);
        assert!((u.tr_mul(&u) - DMatrix::<f64>::identity(4, 4)).amax() < 1e-12);
    }

    /// Oracle: reconstruction and orthonormality on tall, wide and
    /// rank-deficient inputs, large enough to take the preconditioned path.
    #[test]
    fn sorted_svd_left_on_assorted_shapes() {
        let base = |r: usize, c: usize, k: usize| {
            DMatrix::from_fn(r, c, |i, j| (((i * 7 + j * 13 + k) % 17) as f64 - 8.0) * 0.25 + ((i * j) % 5) as f64)
        };
        let low_rank = base(60, 3, 1) * base(3, 45, 2);
        for m in [base(80, 30, 0), base(30, 80, 3), low_rank.clone(), base(40, 40, 4)] {
            let (u, s) = sorted_svd_left(m.clone()).unwrap();
            let k = u.ncols();
            assert!((u.tr_mul(&u) - DMatrix::<f64>::identity(k, k)).amax() < 1e-12);
            assert!(s.as_slice().windows(2).all(|w| w[0] >= w[1]));
            // uᵀm has orthogonal rows with norms equal to sigma.
            let g = u.tr_mul(&m) * m.tr_mul(&u);
            for i in 0..k {
                for j in 0..k {
                    let want = if i == j { s[i] * s[i] } else { 0.0 };
                    assert!((g[(i, j)] - want).abs() < 1e-9 * s[0] * s[0], "({i},{j})");
                }
            }
            assert!(((s.norm_squared() - m.norm_squared()) / m.norm_squared()).abs() < 1e-12);
        }
        let (_, s) = sorted_svd_left(low_rank).unwrap();
        assert!(s[3] < 1e-12 * s[0]);
    }

    #[test]
    fn complement_drops_columns_in_span() {
        let basis = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let cols = DMatrix::from_column_slice(3, 3, &[2.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 3.0, 0.0]);
        let e = orthonormal_complement(&basis, &cols, 1e-10);
        assert_eq!(e.ncols(), 1);
        assert!((e[(1, 0)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn principal_angles_of_rotated_plane() {
        let a = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let t = 0.3f64;
        let b = DMatrix::from_column_slice(3, 1, &[t.cos(), t.sin(), 0.0]);
        let s = principal_angle_sines(&a, &b).unwrap();
        assert!((s[0] - t.sin()).abs() < 1e-14);
    }

    #[test]
    fn polar_of_scaled_rotation_is_rotation() {
        let t = 0.7f64;
        let m = DMatrix::from_row_slice(2, 2, &[2.0 * t.cos(), -2.0 * t.sin(), 2.0 * t.sin(), 2.0 * t.cos()]);
        let q = polar_factor(&m).unwrap();
        assert!((q[(0, 0)] - t.cos()).abs() < 1e-12);
        assert!((q[(1, 0)] - t.sin()).abs() < 1e-12);
    }

    #[test]
    fn ridge_rejects_nonpositive_lambda() {
        let x = DMatrix::identity(2, 2);
        assert!(ridge_solve(&x, &x, 0.0).is_err());
    }
}
