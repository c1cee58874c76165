//! Small dense-matrix helpers for the low-dimensional models used here.
//!
//! Matrices are stored row-major in flat `Vec<f64>` slices; dimensions stay in
//! the single digits, so simple O(n^3) routines are the right tool.

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` of a symmetric positive definite
/// matrix, row-major. Fails if the matrix is not SPD.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n, "cholesky: bad input length");
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::NotPositiveDefinite(format!(
                        "pivot {} at row {}",
                        s, i
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors) with eigenvectors in columns.
pub fn jacobi_eigh(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..n).map(|i| m[i * n + i]).collect();
    (eig, v)
}

/// Symmetric PSD square root via eigendecomposition. Small negative
/// eigenvalues from rounding are clamped to zero.
pub fn psd_sqrt(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let (eig, v) = jacobi_eigh(a, n);
    let scale = eig.iter().fold(0.0f64, |acc, e| acc.max(e.abs()));
    let mut root = vec![0.0; n * n];
    for (idx, &e) in eig.iter().enumerate() {
        if e < -1e-10 * scale.max(1.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "eigenvalue {} is negative",
                e
            )));
        }
        let se = e.max(0.0).sqrt();
        for i in 0..n {
            for j in 0..n {
                root[i * n + j] += v[i * n + idx] * se * v[j * n + idx];
            }
        }
    }
    Ok(root)
}

/// y = A x for row-major A (rows x cols).
pub fn matvec(a: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    for i in 0..rows {
        let row = &a[i * cols..(i + 1) * cols];
        let mut s = 0.0;
        for (aij, xj) in row.iter().zip(x.iter()) {
            s += aij * xj;
        }
        y[i] = s;
    }
}

/// C = A A^T for row-major A (n x n).
pub fn gram(a: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i * n + k] * a[j * n + k];
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cholesky_reconstructs() {
        let rho = [1.0, 0.7, 0.2, 0.7, 1.0, -0.3, 0.2, -0.3, 1.0];
        let l = cholesky(&rho, 3).unwrap();
        let back = gram(&l, 3);
        for (a, b) in rho.iter().zip(back.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_non_spd() {
        let bad = [1.0, 2.0, 2.0, 1.0];
        assert!(cholesky(&bad, 2).is_err());
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let a = [2.0, 0.5, 0.1, 0.5, 1.5, -0.2, 0.1, -0.2, 0.8];
        let r = psd_sqrt(&a, 3).unwrap();
        let back = gram(&r, 3);
        for (x, y) in a.iter().zip(back.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
    }

    #[test]
    fn jacobi_eigenvalues_of_diagonal() {
        let a = [3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0];
        let (mut eig, _) = jacobi_eigh(&a, 3);
        eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_abs_diff_eq!(eig[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eig[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eig[2], 3.0, epsilon = 1e-12);
    }
}
