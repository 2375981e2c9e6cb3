//! The six covariance-based detectors: Chronochrome prediction, covariance
//! equalization, difference RX, straight and hyperbolic stacked detectors,
//! and iteratively reweighted slow feature analysis.

use super::{centered_pair, check_dims, cholesky_or_diagnose, fit_statistics, ridge, StatModel};
use crate::cube::{radiometric_align, HsiCube};
use crate::error::{Error, Result};
use crate::linalg;
use crate::maps::ScoreMap;

/// Numerical floor for residual covariances, relative to the time-2
/// covariance scale. Keeps the Mahalanobis step invertible when the
/// inter-image relation is exactly linear and the residual covariance
/// collapses to rounding noise.
const RESIDUAL_FLOOR: f64 = 1e-12;

/// A covariance whose total variance is below this fraction of its natural
/// reference scale is numerically indistinguishable from zero: the centered
/// quantity it models is rounding noise, and the score map is zero.
const DEGENERATE_SCALE: f64 = 1e-20;

fn matvec(m: &[f64], n: usize, v: &[f64], out: &mut [f64]) {
    for i in 0..n {
        let row = &m[i * n..(i + 1) * n];
        out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// x^T M v for row-major M.
fn matvec_t(m: &[f64], n: usize, v: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for i in 0..n {
        let row = &m[i * n..(i + 1) * n];
        let vi = v[i];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * vi;
        }
    }
}

fn trace(m: &[f64], n: usize) -> f64 {
    (0..n).map(|i| m[i * n + i]).sum()
}

fn symmetrize(m: &mut [f64], n: usize) {
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = avg;
            m[j * n + i] = avg;
        }
    }
}

/// Residual covariance regularization: the requested ridge plus a tiny
/// floor anchored to the time-2 covariance scale.
fn regularize_residual(ce: &[f64], n: usize, reg_eps: f64, c22_trace: f64) -> Vec<f64> {
    let own = reg_eps * trace(ce, n) / n as f64;
    let floor = RESIDUAL_FLOOR * c22_trace / n as f64;
    let r = own.max(floor);
    let mut out = ce.to_vec();
    for i in 0..n {
        out[i * n + i] += r;
    }
    out
}

/// Chronochrome: linear least-squares prediction of time 2 from time 1;
/// the residual is scored by Mahalanobis distance under the prediction-error
/// covariance (the Schur complement of C11 in the joint covariance).
pub fn detect_cc(stats: &StatModel, x1: &HsiCube, x2: &HsiCube) -> Result<ScoreMap> {
    check_dims(stats, x1, x2)?;
    let c = stats.bands();
    let c11_l = cholesky_or_diagnose(&stats.regularized(stats.c11(), c), c)?;

    // M = C11^{-1} C12, solved column by column; the predictor is M^T.
    let mut m = vec![0.0; c * c];
    for j in 0..c {
        let col: Vec<f64> = (0..c).map(|i| stats.c12()[i * c + j]).collect();
        let sol = linalg::cholesky_solve(&c11_l, c, &col);
        for i in 0..c {
            m[i * c + j] = sol[i];
        }
    }
    // Prediction-error covariance Ce = C22 - C12^T M.
    let mut ce = stats.c22().to_vec();
    for i in 0..c {
        for j in 0..c {
            let mut dot = 0.0;
            for k in 0..c {
                dot += stats.c12()[k * c + i] * m[k * c + j];
            }
            ce[i * c + j] -= dot;
        }
    }
    symmetrize(&mut ce, c);
    let c22_trace = trace(stats.c22(), c);
    if c22_trace == 0.0 {
        return ScoreMap::new(x1.height(), x1.width(), vec![0.0; x1.pixel_count()]);
    }
    let ce_l = cholesky_or_diagnose(&regularize_residual(&ce, c, stats.reg_eps(), c22_trace), c)?;

    let px = x1.pixel_count();
    let mut scores = vec![0.0; px];
    let mut u1 = vec![0.0; c];
    let mut u2 = vec![0.0; c];
    let mut predicted = vec![0.0; c];
    for p in 0..px {
        centered_pair(x1, x2, stats, p, &mut u1, &mut u2);
        matvec_t(&m, c, &u1, &mut predicted); // M^T u1
        let residual: Vec<f64> = u2.iter().zip(&predicted).map(|(a, b)| a - b).collect();
        scores[p] = linalg::mahalanobis_sq(&ce_l, c, &residual);
    }
    ScoreMap::new(x1.height(), x1.width(), scores)
}

/// Covariance equalization: whiten time 1 with C11^{-1/2}, recolor with
/// C22^{1/2}, then score the prediction residual by Mahalanobis distance
/// under its own sample covariance.
pub fn detect_ce(stats: &StatModel, x1: &HsiCube, x2: &HsiCube) -> Result<ScoreMap> {
    check_dims(stats, x1, x2)?;
    let c = stats.bands();
    let floor = stats.reg_eps() * trace(stats.c11(), c) / c as f64;

    let (w1, _) = linalg::jacobi_eigen(stats.c11(), c);
    if w1[0].max(floor) <= 0.0 {
        return Err(Error::Conditioning {
            smallest_eigenvalue: w1[0],
        });
    }
    let inv_sqrt_c11 = linalg::symmetric_apply(stats.c11(), c, floor, |w| 1.0 / w.sqrt());
    let sqrt_c22 = linalg::symmetric_apply(
        stats.c22(),
        c,
        stats.reg_eps() * trace(stats.c22(), c) / c as f64,
        |w| w.max(0.0).sqrt(),
    );
    let l = linalg::matmul(&sqrt_c22, &inv_sqrt_c11, c, c, c);

    // Residuals and their sample covariance (the u's are mean-centered, so
    // the residuals have exactly zero mean).
    let px = x1.pixel_count();
    let mut residuals = vec![0.0; px * c];
    let mut u1 = vec![0.0; c];
    let mut u2 = vec![0.0; c];
    let mut predicted = vec![0.0; c];
    for p in 0..px {
        centered_pair(x1, x2, stats, p, &mut u1, &mut u2);
        matvec(&l, c, &u1, &mut predicted);
        for b in 0..c {
            residuals[p * c + b] = u2[b] - predicted[b];
        }
    }
    let mut ce = vec![0.0; c * c];
    for p in 0..px {
        let e = &residuals[p * c..(p + 1) * c];
        for i in 0..c {
            for j in i..c {
                ce[i * c + j] += e[i] * e[j];
            }
        }
    }
    let inv_n = 1.0 / px as f64;
    for i in 0..c {
        for j in i..c {
            ce[i * c + j] *= inv_n;
            ce[j * c + i] = ce[i * c + j];
        }
    }
    let c22_trace = trace(stats.c22(), c);
    if c22_trace == 0.0 {
        return ScoreMap::new(x1.height(), x1.width(), vec![0.0; px]);
    }
    let ce_l = cholesky_or_diagnose(&regularize_residual(&ce, c, stats.reg_eps(), c22_trace), c)?;

    let mut scores = vec![0.0; px];
    for p in 0..px {
        scores[p] = linalg::mahalanobis_sq(&ce_l, c, &residuals[p * c..(p + 1) * c]);
    }
    ScoreMap::new(x1.height(), x1.width(), scores)
}

/// Equalization transform L = C22^{1/2} C11^{-1/2}, exposed for the identity
/// check L C11 L^T = C22.
pub fn ce_transform(stats: &StatModel) -> Result<Vec<f64>> {
    let c = stats.bands();
    let floor = stats.reg_eps() * trace(stats.c11(), c) / c as f64;
    let (w1, _) = linalg::jacobi_eigen(stats.c11(), c);
    if w1[0].max(floor) <= 0.0 {
        return Err(Error::Conditioning {
            smallest_eigenvalue: w1[0],
        });
    }
    let inv_sqrt_c11 = linalg::symmetric_apply(stats.c11(), c, floor, |w| 1.0 / w.sqrt());
    let sqrt_c22 = linalg::symmetric_apply(
        stats.c22(),
        c,
        stats.reg_eps() * trace(stats.c22(), c) / c as f64,
        |w| w.max(0.0).sqrt(),
    );
    Ok(linalg::matmul(&sqrt_c22, &inv_sqrt_c11, c, c, c))
}

/// Difference RX: Mahalanobis distance of the mean-centered per-pixel
/// difference under the difference covariance. The mean score over all
/// pixels equals the band count when reg_eps = 0.
pub fn detect_diff_rx(stats: &StatModel, x1: &HsiCube, x2: &HsiCube) -> Result<ScoreMap> {
    check_dims(stats, x1, x2)?;
    let c = stats.bands();
    let px = x1.pixel_count();
    let spread = 0.5 * (trace(stats.c11(), c) + trace(stats.c22(), c));
    if trace(stats.cd(), c) <= DEGENERATE_SCALE * spread {
        // All differences equal their mean to rounding precision.
        return ScoreMap::new(x1.height(), x1.width(), vec![0.0; px]);
    }
    let cd_l = cholesky_or_diagnose(&stats.regularized(stats.cd(), c), c)?;
    let mut scores = vec![0.0; px];
    let mut u1 = vec![0.0; c];
    let mut u2 = vec![0.0; c];
    for p in 0..px {
        centered_pair(x1, x2, stats, p, &mut u1, &mut u2);
        let d: Vec<f64> = u2.iter().zip(&u1).map(|(a, b)| a - b).collect();
        scores[p] = linalg::mahalanobis_sq(&cd_l, c, &d);
    }
    ScoreMap::new(x1.height(), x1.width(), scores)
}

/// Straight anomalous change detector: Mahalanobis distance of the stacked
/// centered pixel [u1; u2] under the joint covariance. The mean score equals
/// twice the band count when reg_eps = 0.
pub fn detect_sacd(stats: &StatModel, x1: &HsiCube, x2: &HsiCube) -> Result<ScoreMap> {
    check_dims(stats, x1, x2)?;
    let c = stats.bands();
    let n2 = 2 * c;
    let px = x1.pixel_count();
    // Reference scale: mean squared value over both cubes. A joint spread
    // below rounding level of that means both cubes are constant.
    let ms1: f64 = x1.values().iter().map(|v| v * v).sum::<f64>() / (px * c) as f64;
    let ms2: f64 = x2.values().iter().map(|v| v * v).sum::<f64>() / (px * c) as f64;
    if trace(stats.cz(), n2) <= DEGENERATE_SCALE * (ms1 + ms2) {
        return ScoreMap::new(x1.height(), x1.width(), vec![0.0; px]);
    }
    let cz_l = cholesky_or_diagnose(&stats.regularized(stats.cz(), n2), n2)?;
    let mut scores = vec![0.0; px];
    let mut z = vec![0.0; n2];
    for p in 0..px {
        let (u1, u2) = z.split_at_mut(c);
        centered_pair(x1, x2, stats, p, u1, u2);
        scores[p] = linalg::mahalanobis_sq(&cz_l, n2, &z);
    }
    ScoreMap::new(x1.height(), x1.width(), scores)
}

/// Hyperbolic anomalous change detector after simple-difference
/// preconditioning: time 2 is radiometrically aligned onto time 1, the
/// statistics are refitted, and the score is the stacked Mahalanobis term
/// minus both marginal Mahalanobis terms. Scores may be negative.
pub fn detect_sdhacd(stats: &StatModel, x1: &HsiCube, x2: &HsiCube) -> Result<ScoreMap> {
    check_dims(stats, x1, x2)?;
    let aligned = radiometric_align(x1, x2)?;
    let stats = fit_statistics(x1, &aligned, stats.reg_eps())?;
    let c = stats.bands();
    let n2 = 2 * c;
    let cz_l = cholesky_or_diagnose(&stats.regularized(stats.cz(), n2), n2)?;
    let c11_l = cholesky_or_diagnose(&stats.regularized(stats.c11(), c), c)?;
    let c22_l = cholesky_or_diagnose(&stats.regularized(stats.c22(), c), c)?;

    let px = x1.pixel_count();
    let mut scores = vec![0.0; px];
    let mut z = vec![0.0; n2];
    for p in 0..px {
        let (u1, u2) = z.split_at_mut(c);
        centered_pair(x1, &aligned, &stats, p, u1, u2);
        let marginal1 = linalg::mahalanobis_sq(&c11_l, c, u1);
        let marginal2 = linalg::mahalanobis_sq(&c22_l, c, u2);
        scores[p] = linalg::mahalanobis_sq(&cz_l, n2, &z) - marginal1 - marginal2;
    }
    ScoreMap::new(x1.height(), x1.width(), scores)
}

/// Eigenvalue floor in the slow-feature score denominator.
const SFA_EIGEN_FLOOR: f64 = 1e-12;

/// Per-band standardization of a cube (population statistics); constant
/// bands pass through as zeros.
fn standardize(cube: &HsiCube) -> Vec<f64> {
    let c = cube.bands();
    let px = cube.pixel_count();
    let mut out = vec![0.0; px * c];
    for b in 0..c {
        let (mu, sd) = cube.band_stats(b);
        let scale = if sd > 0.0 { 1.0 / sd } else { 0.0 };
        let plane = &cube.values()[b * px..(b + 1) * px];
        for (o, v) in out[b * px..(b + 1) * px].iter_mut().zip(plane) {
            *o = (v - mu) * scale;
        }
    }
    out
}

fn weighted_cov(data: &[f64], weights: &[f64], c: usize, px: usize) -> Vec<f64> {
    let wsum: f64 = weights.iter().sum();
    let mut mean = vec![0.0; c];
    for p in 0..px {
        let w = weights[p];
        for b in 0..c {
            mean[b] += w * data[b * px + p];
        }
    }
    for m in &mut mean {
        *m /= wsum;
    }
    let mut cov = vec![0.0; c * c];
    let mut v = vec![0.0; c];
    for p in 0..px {
        let w = weights[p];
        for b in 0..c {
            v[b] = data[b * px + p] - mean[b];
        }
        for i in 0..c {
            for j in i..c {
                cov[i * c + j] += w * v[i] * v[j];
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            cov[i * c + j] /= wsum;
            cov[j * c + i] = cov[i * c + j];
        }
    }
    cov
}

/// One slow-feature eigensolve: A w = lambda B w reduced through the
/// Cholesky factor of B to an ordinary symmetric problem, so the returned
/// basis satisfies W^T B W = I. Eigenvalues ascend.
fn sfa_eigen(a: &[f64], b: &[f64], c: usize, reg_eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let b_reg = ridge(b, c, reg_eps);
    let b_l = cholesky_or_diagnose(&b_reg, c)?;
    // A~ = L^{-1} A L^{-T}
    let mut m1 = vec![0.0; c * c];
    for j in 0..c {
        let col: Vec<f64> = (0..c).map(|i| a[i * c + j]).collect();
        let sol = linalg::forward_substitute(&b_l, c, &col);
        for i in 0..c {
            m1[i * c + j] = sol[i];
        }
    }
    let mut a_tilde = vec![0.0; c * c];
    for j in 0..c {
        let col: Vec<f64> = (0..c).map(|i| m1[j * c + i]).collect();
        let sol = linalg::forward_substitute(&b_l, c, &col);
        for i in 0..c {
            a_tilde[i * c + j] = sol[i];
        }
    }
    symmetrize(&mut a_tilde, c);
    let (lambdas, y) = linalg::jacobi_eigen(&a_tilde, c);
    // w_j = L^{-T} y_j
    let mut w_mat = vec![0.0; c * c];
    for j in 0..c {
        let col: Vec<f64> = (0..c).map(|i| y[i * c + j]).collect();
        let sol = linalg::backward_substitute(&b_l, c, &col);
        for i in 0..c {
            w_mat[i * c + j] = sol[i];
        }
    }
    Ok((lambdas, w_mat))
}

/// Unsupervised slow feature analysis with iterative down-weighting of
/// likely-changed pixels.
///
/// Both cubes are standardized per band; each round solves the generalized
/// eigenproblem A w = lambda B w for the weighted difference covariance A
/// against the weighted average covariance B, scores pixels by the
/// chi-square-normalized slow-feature difference, and reweights pixels as
/// exp(-score / (2 median)). The map from the final round is returned.
pub fn detect_usfa(
    x1: &HsiCube,
    x2: &HsiCube,
    iterations: usize,
    reg_eps: f64,
) -> Result<ScoreMap> {
    if !x1.same_dims(x2) {
        return Err(Error::shape(
            format!("{}x{}x{}", x1.height(), x1.width(), x1.bands()),
            format!("{}x{}x{}", x2.height(), x2.width(), x2.bands()),
        ));
    }
    if iterations == 0 {
        return Err(Error::InvalidConfig {
            message: "usfa iterations must be >= 1".into(),
        });
    }
    let c = x1.bands();
    let px = x1.pixel_count();
    let s1 = standardize(x1);
    let s2 = standardize(x2);
    let diff: Vec<f64> = s2.iter().zip(&s1).map(|(a, b)| a - b).collect();

    let mut weights = vec![1.0; px];
    let mut scores = vec![0.0; px];
    for _round in 0..iterations {
        let a = weighted_cov(&diff, &weights, c, px);
        let mut b_avg = weighted_cov(&s1, &weights, c, px);
        let b2 = weighted_cov(&s2, &weights, c, px);
        for (x, y) in b_avg.iter_mut().zip(&b2) {
            *x = 0.5 * (*x + y);
        }
        let (lambdas, w_mat) = sfa_eigen(&a, &b_avg, c, reg_eps)?;

        let mut d = vec![0.0; c];
        let mut proj = vec![0.0; c];
        for p in 0..px {
            for b in 0..c {
                d[b] = diff[b * px + p];
            }
            matvec_t(&w_mat, c, &d, &mut proj); // proj[j] = w_j . d
            scores[p] = proj
                .iter()
                .zip(&lambdas)
                .map(|(t, &l)| t * t / l.max(SFA_EIGEN_FLOOR))
                .sum();
        }

        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[px / 2];
        if median > SFA_EIGEN_FLOOR {
            for p in 0..px {
                weights[p] = (-scores[p] / (2.0 * median)).exp();
            }
        }
    }
    ScoreMap::new(x1.height(), x1.width(), scores)
}

/// First-round slow-feature eigenpairs on unweighted statistics, exposed for
/// the B-orthonormality check W^T B W = I. Returns (eigenvalues, basis, B).
pub fn usfa_eigenbasis(
    x1: &HsiCube,
    x2: &HsiCube,
    reg_eps: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if !x1.same_dims(x2) {
        return Err(Error::shape(
            "matching cubes".to_string(),
            "mismatched cubes".to_string(),
        ));
    }
    let c = x1.bands();
    let px = x1.pixel_count();
    let s1 = standardize(x1);
    let s2 = standardize(x2);
    let diff: Vec<f64> = s2.iter().zip(&s1).map(|(a, b)| a - b).collect();
    let weights = vec![1.0; px];
    let a = weighted_cov(&diff, &weights, c, px);
    let mut b_avg = weighted_cov(&s1, &weights, c, px);
    let b2 = weighted_cov(&s2, &weights, c, px);
    for (x, y) in b_avg.iter_mut().zip(&b2) {
        *x = 0.5 * (*x + y);
    }
    let (lambdas, w_mat) = sfa_eigen(&a, &b_avg, c, reg_eps)?;
    Ok((lambdas, w_mat, b_avg))
}
