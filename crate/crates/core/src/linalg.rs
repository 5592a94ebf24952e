//! Dense linear algebra used by the memory solves.
//!
//! Every pseudo-inverse application `A† B` in the model goes through
//! [`pinv_solve`], which realizes it as ridge-regularized least squares
//! `argmin_X ||A X - B||² + λ ||X||²`. For `λ > 0` the smaller of the two
//! equivalent normal-equation systems is solved with a Cholesky factorization;
//! for `λ = 0` the minimum-norm solution is taken from a symmetric
//! eigendecomposition of the Gram matrix.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{shape_err, Error, Result};

pub type Mat = Array2<f64>;

/// Default ridge used for every pseudo-inverse in the model.
pub const DEFAULT_RIDGE: f64 = 1e-6;

/// Relative eigenvalue cutoff (on `σ²`) for the unregularized path.
const EIG_CUTOFF: f64 = 1e-12;

pub fn all_finite(m: &ArrayView2<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn identity(n: usize) -> Mat {
    Array2::eye(n)
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &ArrayView2<f64>) -> Result<Mat> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(shape_err("cholesky", format!("{}x{} is not square", n, a.ncols())));
    }
    let mut l = Mat::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ X = B` given the Cholesky factor `L`.
pub fn cholesky_solve(l: &Mat, b: &ArrayView2<f64>) -> Mat {
    let n = l.nrows();
    let mut x = b.to_owned();
    for c in 0..x.ncols() {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[[i, c]];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    x
}

/// `a + λ I` for square `a`.
pub fn add_diag(a: &Mat, lambda: f64) -> Mat {
    let mut out = a.clone();
    for i in 0..out.nrows() {
        out[[i, i]] += lambda;
    }
    out
}

/// Solves `G X = R` for symmetric positive definite `G`.
pub fn solve_spd(g: &Mat, r: &ArrayView2<f64>) -> Result<Mat> {
    let l = cholesky(&g.view())?;
    Ok(cholesky_solve(&l, r))
}

/// Ridge-regularized least squares `argmin_X ||A X − B||² + λ||X||²`.
///
/// `A` is `p×r`, `B` is `p×c`, the result is `r×c`. With `λ = 0` the
/// Moore–Penrose solution `A† B` is returned.
pub fn pinv_solve(a: &ArrayView2<f64>, b: &ArrayView2<f64>, lambda: f64) -> Result<Mat> {
    if a.nrows() != b.nrows() {
        return Err(shape_err(
            "pinv_solve",
            format!("A is {}x{}, B is {}x{}", a.nrows(), a.ncols(), b.nrows(), b.ncols()),
        ));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("ridge lambda must be >= 0, got {lambda}")));
    }
    if !all_finite(a) || !all_finite(b) {
        return Err(Error::NonFinite("pinv_solve input"));
    }
    if lambda == 0.0 {
        return Ok(min_norm_solve(a, b));
    }
    let (p, r) = a.dim();
    if r <= p {
        let gram = add_diag(&a.t().dot(a), lambda);
        let rhs = a.t().dot(b);
        solve_spd(&gram, &rhs.view())
    } else {
        let gram = add_diag(&a.dot(&a.t()), lambda);
        let y = solve_spd(&gram, b)?;
        Ok(a.t().dot(&y))
    }
}

/// Pseudo-inverse of `A` (`r×p`), ridge-regularized like [`pinv_solve`].
pub fn pinv(a: &ArrayView2<f64>, lambda: f64) -> Result<Mat> {
    pinv_solve(a, &identity(a.nrows()).view(), lambda)
}

fn min_norm_solve(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Mat {
    // A† = V Λ⁺ Vᵀ Aᵀ with AᵀA = V Λ Vᵀ.
    let r = a.ncols();
    let gram = a.t().dot(a);
    let g = nalgebra::DMatrix::from_fn(r, r, |i, j| gram[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(g);
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = max_ev * EIG_CUTOFF;
    let mut core = Mat::zeros((r, r));
    for k in 0..r {
        let ev = eig.eigenvalues[k];
        if ev > cutoff && ev > 0.0 {
            for i in 0..r {
                for j in 0..r {
                    core[[i, j]] += eig.eigenvectors[(i, k)] * eig.eigenvectors[(j, k)] / ev;
                }
            }
        }
    }
    core.dot(&a.t().dot(b))
}

/// Euclidean distance between each row of `rows` and `point` (a single row).
pub fn row_distances(rows: &ArrayView2<f64>, point: &[f64]) -> Vec<f64> {
    rows.axis_iter(Axis(0))
        .map(|r| {
            r.iter()
                .zip(point)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Index of the smallest value; ties resolve to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

pub fn frobenius(m: &ArrayView2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_solve() {
        let i2 = identity(2);
        let x = pinv_solve(&i2.view(), &i2.view(), 0.0).unwrap();
        assert_eq!(x, i2);
    }

    #[test]
    fn rank_deficient_minimum_norm() {
        let a = array![[1.0, 0.0], [0.0, 0.0]];
        let b = array![[2.0], [5.0]];
        let x = pinv_solve(&a.view(), &b.view(), 0.0).unwrap();
        assert!((x[[0, 0]] - 2.0).abs() < 1e-12);
        assert!(x[[1, 0]].abs() < 1e-12);
    }

    #[test]
    fn wide_and_tall_paths_agree() {
        let a = array![[1.0, 2.0, 0.5], [0.3, -1.0, 2.0]];
        let b = array![[1.0], [2.0]];
        // wide: r > p takes the dual system
        let x = pinv_solve(&a.view(), &b.view(), 1e-3).unwrap();
        let gram = add_diag(&a.t().dot(&a), 1e-3);
        let primal = solve_spd(&gram, &a.t().dot(&b).view()).unwrap();
        for (u, v) in x.iter().zip(primal.iter()) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let a = array![[f64::NAN]];
        let b = array![[1.0]];
        assert!(matches!(
            pinv_solve(&a.view(), &b.view(), 1e-6),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn rejects_shape_mismatch() {
        let a = Mat::zeros((3, 2));
        let b = Mat::zeros((2, 1));
        assert!(matches!(pinv_solve(&a.view(), &b.view(), 1e-6), Err(Error::Shape { .. })));
    }

    #[test]
    fn argmin_ties_go_low() {
        assert_eq!(argmin(&[3.0, 1.0, 2.0, 1.0]), 1);
    }
}
