//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::DMatrix;

/// Relative singular-value cutoff used by [`pinv`] when callers have no better choice.
pub const DEFAULT_PINV_TOL: f64 = 1e-10;

/// Moore–Penrose pseudo-inverse.
///
/// Singular values below `tol * sigma_max` are treated as zero, so `pinv([[0]]) = [[0]]`.
/// The SVD is computed by one-sided Jacobi rotations: for the small blocks
/// used here it is cheap and stays accurate on exactly rank-deficient input,
/// where `nalgebra`'s bidiagonal SVD occasionally fails to reconstruct `M`.
pub fn pinv(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    if rows < cols {
        return pinv(&m.transpose(), tol).transpose();
    }
    let (u, sigma, v) = jacobi_svd(m);
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    let mut out = DMatrix::zeros(cols, rows);
    if sigma_max == 0.0 {
        return out;
    }
    for (k, &s) in sigma.iter().enumerate() {
        if s > tol * sigma_max {
            // columns of `u` carry the factor sigma_k
            out += v.column(k) * u.column(k).transpose() / (s * s);
        }
    }
    out
}

/// One-sided (Hestenes) Jacobi SVD of a tall matrix: returns `(U Σ, σ, V)`.
fn jacobi_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let n = m.ncols();
    let mut u = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let a = u.column(p).norm_squared();
                let b = u.column(q).norm_squared();
                let g = u.column(p).dot(&u.column(q));
                if g == 0.0 || g.abs() <= f64::EPSILON * (a * b).sqrt() {
                    continue;
                }
                rotated = true;
                let z = (b - a) / (2.0 * g);
                let t = z.signum() / (z.abs() + (1.0 + z * z).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut u, &mut v] {
                    for i in 0..mat.nrows() {
                        let (x, y) = (mat[(i, p)], mat[(i, q)]);
                        mat[(i, p)] = c * x - s * y;
                        mat[(i, q)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma = (0..n).map(|k| u.column(k).norm()).collect();
    (u, sigma, v)
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Max absolute entry of `M - Mᵀ`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// Solve `M X = rhs` for symmetric positive definite `M` by Cholesky.
/// Returns `None` when the factorization meets a non-positive pivot.
pub fn spd_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = m.clone().cholesky()?;
    Some(chol.solve(rhs))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    symmetrize(m).symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Pairwise (cascade) summation; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and standard error of the mean (`sd / sqrt(n)`).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// `out += scale * M x` with `M` column-major and `x`, `out` plain slices.
#[inline]
pub(crate) fn matvec_acc(out: &mut [f64], m: &DMatrix<f64>, x: &[f64], scale: f64) {
    let rows = m.nrows();
    let data = m.as_slice();
    for (c, &xc) in x.iter().enumerate() {
        let f = scale * xc;
        if f == 0.0 {
            continue;
        }
        let col = &data[c * rows..(c + 1) * rows];
        for (o, &a) in out.iter_mut().zip(col) {
            *o += a * f;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `⟨M x, y⟩` for column-major `M`.
#[inline]
pub(crate) fn bilinear(m: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
    let rows = m.nrows();
    let data = m.as_slice();
    let mut acc = 0.0;
    for (c, &xc) in x.iter().enumerate() {
        if xc == 0.0 {
            continue;
        }
        let col = &data[c * rows..(c + 1) * rows];
        acc += xc * dot(col, y);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pinv_of_zero_is_zero() {
        let z = DMatrix::from_row_slice(1, 1, &[0.0]);
        assert_eq!(pinv(&z, DEFAULT_PINV_TOL)[(0, 0)], 0.0);
    }

    #[test]
    fn pinv_scalar_and_diagonal() {
        let two = DMatrix::from_row_slice(1, 1, &[2.0]);
        assert!((pinv(&two, DEFAULT_PINV_TOL)[(0, 0)] - 0.5).abs() < 1e-15);
        let d = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 0.0]);
        let p = pinv(&d, DEFAULT_PINV_TOL);
        let want = DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.0, 0.0]);
        assert!((p - want).amax() < 1e-15);
    }

    #[test]
    fn pinv_rectangular_shape() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
        let p = pinv(&m, DEFAULT_PINV_TOL);
        assert_eq!(p.shape(), (3, 2));
        assert!((p[(1, 1)] - 0.5).abs() < 1e-14);
    }

    fn low_rank(entries: Vec<f64>, rank: usize) -> DMatrix<f64> {
        // product of a 5×r and r×5 factor
        let left = DMatrix::from_fn(5, rank, |i, j| entries[i * 5 + j]);
        let right = DMatrix::from_fn(rank, 5, |i, j| entries[25 + i * 5 + j]);
        left * right
    }

    proptest! {
        #[test]
        fn penrose_identities(entries in proptest::collection::vec(-1.0f64..1.0, 50), rank in 1usize..=5) {
            let m = low_rank(entries, rank);
            let scale = m.amax().max(1.0);
            prop_assume!(m.amax() > 1e-3);
            let sv = m.clone().svd(false, false).singular_values;
            let smax = sv.max();
            // keep conditioned inputs: retained singular values well separated from the cutoff
            prop_assume!(sv.iter().all(|&s| s < 1e-12 * smax || s > 1e-4 * smax));
            let p = pinv(&m, DEFAULT_PINV_TOL);
            let tol = 1e-8 * scale * p.amax().max(1.0).powi(2);
            let r1 = (&m * &p * &m - &m).amax();
            prop_assert!(r1 <= tol, "r1 {} tol {} sv {:?}", r1, tol, sv.as_slice());
            prop_assert!((&p * &m * &p - &p).amax() <= tol * p.amax().max(1.0));
            prop_assert!(asymmetry(&(&m * &p)) <= tol);
            prop_assert!(asymmetry(&(&p * &m)) <= tol);
        }
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_inputs() {
        let xs: Vec<f64> = (0..1000).map(|k| k as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }

    #[test]
    fn spd_solve_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(spd_solve(&m, &DMatrix::identity(2, 2)).is_none());
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let x = spd_solve(&m, &DMatrix::identity(2, 2)).unwrap();
        assert!((&m * x - DMatrix::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn min_eigenvalue_of_diag() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, -0.5]);
        assert!((min_eigenvalue(&m) + 0.5).abs() < 1e-14);
    }
}
