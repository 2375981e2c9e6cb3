//! Dense symmetric linear algebra: Cholesky factorization/solves and a Jacobi
//! eigensolver. Matrices are row-major `Vec<f64>` of size n*n.

use crate::error::{Error, Result};

/// Row-major dense matrix view helpers.
#[inline]
pub fn at(a: &[f64], n: usize, i: usize, j: usize) -> f64 {
    a[i * n + j]
}

/// c = a * b for a (m x k) and b (k x n).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += ail * b[l * n + j];
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
/// Fails with a conditioning error carrying the offending pivot when the
/// matrix is not positive definite.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Conditioning {
                        smallest_eigenvalue: sum,
                    });
                }
                l[i * n + j] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solve L y = b with L lower triangular.
pub fn forward_substitute(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    y
}

/// Solve L^T x = y with L lower triangular.
pub fn backward_substitute(l: &[f64], n: usize, y: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

/// Solve A x = b given the Cholesky factor L of A.
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    backward_substitute(l, n, &forward_substitute(l, n, b))
}

/// Quadratic form b^T A^{-1} b given the Cholesky factor of A.
/// Computed as ||L^{-1} b||^2, which is nonnegative by construction.
pub fn mahalanobis_sq(l: &[f64], n: usize, b: &[f64]) -> f64 {
    let y = forward_substitute(l, n, b);
    y.iter().map(|v| v * v).sum()
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns eigenvalues in ascending order and eigenvectors as the COLUMNS of
/// the returned matrix: a = V diag(w) V^T, V orthogonal.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&m, n)) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q.
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
    let mut eig: Vec<(f64, usize)> = (0..n).map(|i| (m[i * n + i], i)).collect();
    eig.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let eigenvalues: Vec<f64> = eig.iter().map(|(w, _)| *w).collect();
    let mut vectors = vec![0.0; n * n];
    for (new_col, &(_, old_col)) in eig.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + new_col] = v[k * n + old_col];
        }
    }
    (eigenvalues, vectors)
}

fn frobenius(a: &[f64], n: usize) -> f64 {
    a.iter().take(n * n).map(|v| v * v).sum::<f64>().sqrt()
}

/// Symmetric matrix function via eigendecomposition: f applied to each
/// eigenvalue (floored at `floor`) and recomposed.
pub fn symmetric_apply(a: &[f64], n: usize, floor: f64, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let (w, v) = jacobi_eigen(a, n);
    let mut scaled = vec![0.0; n * n];
    // scaled = V diag(f(w))
    for i in 0..n {
        for j in 0..n {
            scaled[i * n + j] = v[i * n + j] * f(w[j].max(floor));
        }
    }
    matmul(&scaled, &transpose(&v, n, n), n, n, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_spd(n: usize, rng: &mut Rng) -> Vec<f64> {
        // A = B B^T + n * I is comfortably positive definite.
        let b: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        let mut a = matmul(&b, &transpose(&b, n, n), n, n, n);
        for i in 0..n {
            a[i * n + i] += n as f64;
        }
        a
    }

    #[test]
    fn cholesky_reconstructs() {
        let mut rng = Rng::new(5);
        for n in [1, 2, 3, 6, 10] {
            let a = random_spd(n, &mut rng);
            let l = cholesky(&a, n).unwrap();
            let recon = matmul(&l, &transpose(&l, n, n), n, n, n);
            for (x, y) in recon.iter().zip(&a) {
                assert!((x - y).abs() < 1e-9, "n={}", n);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = vec![1.0, 2.0, 2.0, 1.0]; // eigenvalues 3, -1
        assert!(matches!(cholesky(&a, 2), Err(Error::Conditioning { .. })));
    }

    #[test]
    fn solve_matches_direct_2x2() {
        let a = vec![4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        let x = cholesky_solve(&l, 2, &[2.0, 1.0]);
        // Direct inverse: A^{-1} = 1/8 [3 -2; -2 4]
        assert!((x[0] - (3.0 * 2.0 - 2.0 * 1.0) / 8.0).abs() < 1e-12);
        assert!((x[1] - (-2.0 * 2.0 + 4.0 * 1.0) / 8.0).abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_matches_solve() {
        let mut rng = Rng::new(8);
        let n = 5;
        let a = random_spd(n, &mut rng);
        let l = cholesky(&a, n).unwrap();
        let b: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let x = cholesky_solve(&l, n, &b);
        let direct: f64 = b.iter().zip(&x).map(|(bi, xi)| bi * xi).sum();
        assert!((mahalanobis_sq(&l, n, &b) - direct).abs() < 1e-10);
    }

    #[test]
    fn jacobi_reconstructs_and_is_orthogonal() {
        let mut rng = Rng::new(13);
        for n in [2, 4, 7, 12] {
            let a = random_spd(n, &mut rng);
            let (w, v) = jacobi_eigen(&a, n);
            for i in 1..n {
                assert!(w[i] >= w[i - 1], "ascending order");
            }
            // V diag(w) V^T == A
            let mut vd = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    vd[i * n + j] = v[i * n + j] * w[j];
                }
            }
            let recon = matmul(&vd, &transpose(&v, n, n), n, n, n);
            for (x, y) in recon.iter().zip(&a) {
                assert!((x - y).abs() < 1e-8, "reconstruction n={}", n);
            }
            // V^T V == I
            let vtv = matmul(&transpose(&v, n, n), &v, n, n, n);
            for i in 0..n {
                for j in 0..n {
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert!((vtv[i * n + j] - expected).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn jacobi_known_2x2() {
        // [[2, 1], [1, 2]] has eigenvalues 1 and 3.
        let (w, _) = jacobi_eigen(&[2.0, 1.0, 1.0, 2.0], 2);
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!((w[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_sqrt_squares_back() {
        let mut rng = Rng::new(21);
        let n = 6;
        let a = random_spd(n, &mut rng);
        let root = symmetric_apply(&a, n, 0.0, f64::sqrt);
        let sq = matmul(&root, &root, n, n, n);
        for (x, y) in sq.iter().zip(&a) {
            assert!((x - y).abs() < 1e-8);
        }
    }
}
