//! Dense symmetric-matrix helpers for the ambient data dimension `d`.
//!
//! Everything here is O(d^3) textbook material (Cholesky, cyclic Jacobi
//! eigendecomposition) on matrices whose side is the sample dimension, which
//! stays in the single digits for the workloads this crate targets. Keeping
//! the routines local avoids a native LAPACK dependency and makes results
//! bit-reproducible across platforms.

use ndarray::{Array1, Array2};

use crate::{Error, Result};

pub fn frobenius_norm(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_abs_asymmetry(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

pub fn symmetrize(a: &Array2<f64>) -> Array2<f64> {
    0.5 * (a + &a.t())
}

/// Lower-triangular Cholesky factor `L` with `L L^T = A`.
/// Fails when `A` is not (numerically) symmetric positive-definite.
pub fn cholesky_lower(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::invalid("cholesky: matrix must be square"));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::invalid(format!(
                        "cholesky: matrix not positive definite (pivot {s:.3e} at {i})"
                    )));
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve `A x = b` for symmetric positive-definite `A` via Cholesky.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let l = cholesky_lower(a)?;
    Ok(cholesky_solve(&l, b))
}

/// Solve `L L^T x = b` given the lower factor.
pub fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        for k in 0..i {
            let t = l[[i, k]] * y[k];
            y[i] -= t;
        }
        y[i] /= l[[i, i]];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let t = l[[k, i]] * y[k];
            y[i] -= t;
        }
        y[i] /= l[[i, i]];
    }
    y
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// columns, so `A = V diag(w) V^T`.
pub fn sym_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "sym_eigen: matrix must be square");
    let mut m = symmetrize(a);
    let mut v = Array2::<f64>::eye(n);
    let scale = frobenius_norm(&m).max(1.0);

    for _sweep in 0..128 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let tau = (aqq - app) / (2.0 * apq);
                // tan of the rotation angle, stable formula
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // M <- G^T M G with G the (p,q) rotation
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].partial_cmp(&m[[j, j]]).unwrap());
    let mut w = Array1::<f64>::zeros(n);
    let mut vs = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        w[dst] = m[[src, src]];
        for k in 0..n {
            vs[[k, dst]] = v[[k, src]];
        }
    }
    (w, vs)
}

pub fn min_eigenvalue(a: &Array2<f64>) -> f64 {
    let (w, _) = sym_eigen(a);
    w[0]
}

/// Rebuild from the eigendecomposition with a function applied to each
/// eigenvalue: `V diag(f(w)) V^T`.
fn eig_map(a: &Array2<f64>, f: impl Fn(f64) -> f64) -> Array2<f64> {
    let n = a.nrows();
    let (w, v) = sym_eigen(a);
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let fk = f(w[k]);
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += fk * v[[i, k]] * v[[j, k]];
            }
        }
    }
    out
}

/// Symmetric square root with negative eigenvalues clamped to zero first,
/// so near-singular empirical covariances stay well-defined.
pub fn spd_sqrt(a: &Array2<f64>) -> Array2<f64> {
    eig_map(a, |w| w.max(0.0).sqrt())
}

pub fn spd_inverse(a: &Array2<f64>) -> Result<Array2<f64>> {
    let wmin = min_eigenvalue(a);
    if wmin <= 0.0 {
        return Err(Error::invalid(format!(
            "matrix inverse requested for non-SPD matrix (min eigenvalue {wmin:.3e})"
        )));
    }
    Ok(eig_map(a, |w| 1.0 / w))
}

pub fn spd_inv_sqrt(a: &Array2<f64>) -> Result<Array2<f64>> {
    let wmin = min_eigenvalue(a);
    if wmin <= 0.0 {
        return Err(Error::invalid(format!(
            "inverse square root requested for non-SPD matrix (min eigenvalue {wmin:.3e})"
        )));
    }
    Ok(eig_map(a, |w| 1.0 / w.sqrt()))
}

/// Symmetrize and clamp eigenvalues from below at `floor`.
pub fn clamp_eigenvalues(a: &Array2<f64>, floor: f64) -> Array2<f64> {
    eig_map(a, |w| w.max(floor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cholesky_reconstructs() {
        let a = array![[4.0, 2.0, 0.5], [2.0, 5.0, 1.0], [0.5, 1.0, 3.0]];
        let l = cholesky_lower(&a).unwrap();
        let r = l.dot(&l.t());
        for (x, y) in a.iter().zip(r.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky_lower(&a).is_err());
    }

    #[test]
    fn eigen_reconstructs_and_sorts() {
        let a = array![[2.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 1.0]];
        let (w, v) = sym_eigen(&a);
        assert!(w[0] <= w[1] && w[1] <= w[2]);
        // A = V diag(w) V^T
        let mut rec = Array2::<f64>::zeros((3, 3));
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    rec[[i, j]] += w[k] * v[[i, k]] * v[[j, k]];
                }
            }
        }
        for (x, y) in a.iter().zip(rec.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }

    #[test]
    fn eigen_diagonal_matrix() {
        let a = array![[3.0, 0.0], [0.0, -1.0]];
        let (w, _) = sym_eigen(&a);
        assert_abs_diff_eq!(w[0], -1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(w[1], 3.0, epsilon = 1e-14);
    }

    #[test]
    fn sqrt_squares_back() {
        let a = array![[2.0, 0.3], [0.3, 1.0]];
        let s = spd_sqrt(&a);
        let r = s.dot(&s);
        for (x, y) in a.iter().zip(r.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = array![[2.0, 0.3], [0.3, 1.0]];
        let inv = spd_inverse(&a).unwrap();
        let id = a.dot(&inv);
        assert_abs_diff_eq!(id[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(id[[1, 1]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(id[[0, 1]], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn solve_spd_matches_inverse() {
        let a = array![[4.0, 1.0], [1.0, 3.0]];
        let b = array![1.0, 2.0];
        let x = solve_spd(&a, &b).unwrap();
        let back = a.dot(&x);
        assert_abs_diff_eq!(back[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(back[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn clamp_lifts_negative_eigenvalue() {
        let a = array![[-1.0]];
        let c = clamp_eigenvalues(&a, 1e-6);
        assert_abs_diff_eq!(c[[0, 0]], 1e-6, epsilon = 0.0);
    }
}
