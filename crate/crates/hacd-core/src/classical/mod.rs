//! Classical covariance-based anomalous change detectors.
//!
//! All six detectors share the second-order statistics estimated by
//! [`fit_statistics`]: per-time means, covariances, the cross-covariance,
//! the difference covariance, and the stacked joint covariance. Scoring is
//! per pixel over the immutable [`StatModel`]; no randomness anywhere.

mod detectors;

pub use detectors::{
    ce_transform, detect_cc, detect_ce, detect_diff_rx, detect_sacd, detect_sdhacd, detect_usfa,
    usfa_eigenbasis,
};

use crate::cube::HsiCube;
use crate::error::{Error, Result};
use crate::linalg;

/// Ridge applied when the pixel count does not exceed the band count.
const AUTO_RAISE_REG: f64 = 1e-3;

/// Second-order statistics of a co-registered cube pair. Covariances use the
/// N denominator.
#[derive(Debug, Clone)]
pub struct StatModel {
    bands: usize,
    pixel_count: usize,
    reg_eps: f64,
    mu1: Vec<f64>,
    mu2: Vec<f64>,
    c11: Vec<f64>,
    c22: Vec<f64>,
    /// c12[i, j] = cov(x1_i, x2_j); C21 is its transpose.
    c12: Vec<f64>,
    /// Covariance of the per-pixel difference x2 - x1.
    cd: Vec<f64>,
    /// 2C x 2C joint covariance of the stacked pixel [x1; x2].
    cz: Vec<f64>,
}

impl StatModel {
    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixel_count(&self) -> usize {
        self.pixel_count
    }

    pub fn reg_eps(&self) -> f64 {
        self.reg_eps
    }

    pub fn mu1(&self) -> &[f64] {
        &self.mu1
    }

    pub fn mu2(&self) -> &[f64] {
        &self.mu2
    }

    pub fn c11(&self) -> &[f64] {
        &self.c11
    }

    pub fn c22(&self) -> &[f64] {
        &self.c22
    }

    pub fn c12(&self) -> &[f64] {
        &self.c12
    }

    pub fn cd(&self) -> &[f64] {
        &self.cd
    }

    pub fn cz(&self) -> &[f64] {
        &self.cz
    }

    /// Copy of `matrix` with reg_eps * trace / n added to the diagonal.
    pub(crate) fn regularized(&self, matrix: &[f64], n: usize) -> Vec<f64> {
        ridge(matrix, n, self.reg_eps)
    }
}

pub(crate) fn ridge(matrix: &[f64], n: usize, reg_eps: f64) -> Vec<f64> {
    let mut out = matrix.to_vec();
    if reg_eps > 0.0 {
        let trace: f64 = (0..n).map(|i| matrix[i * n + i]).sum();
        let r = reg_eps * trace / n as f64;
        for i in 0..n {
            out[i * n + i] += r;
        }
    }
    out
}

/// Cholesky factorization that reports the smallest eigenvalue when the
/// matrix is not positive definite.
pub(crate) fn cholesky_or_diagnose(matrix: &[f64], n: usize) -> Result<Vec<f64>> {
    match linalg::cholesky(matrix, n) {
        Ok(l) => Ok(l),
        Err(_) => {
            let (w, _) = linalg::jacobi_eigen(matrix, n);
            Err(Error::Conditioning {
                smallest_eigenvalue: w[0],
            })
        }
    }
}

pub fn fit_statistics(x1: &HsiCube, x2: &HsiCube, reg_eps: f64) -> Result<StatModel> {
    if !x1.same_dims(x2) {
        return Err(Error::shape(
            format!("{}x{}x{}", x1.height(), x1.width(), x1.bands()),
            format!("{}x{}x{}", x2.height(), x2.width(), x2.bands()),
        ));
    }
    let c = x1.bands();
    let px = x1.pixel_count();
    let reg_eps = if px <= c {
        reg_eps.max(AUTO_RAISE_REG)
    } else {
        reg_eps
    };

    let v1 = x1.values();
    let v2 = x2.values();
    let inv_n = 1.0 / px as f64;

    let mut mu1 = vec![0.0; c];
    let mut mu2 = vec![0.0; c];
    for b in 0..c {
        let plane1 = &v1[b * px..(b + 1) * px];
        let plane2 = &v2[b * px..(b + 1) * px];
        mu1[b] = plane1.iter().sum::<f64>() * inv_n;
        mu2[b] = plane2.iter().sum::<f64>() * inv_n;
    }

    // Second pass: accumulate the upper triangles, then mirror, so the
    // stored covariances are exactly symmetric.
    let mut c11 = vec![0.0; c * c];
    let mut c22 = vec![0.0; c * c];
    let mut c12 = vec![0.0; c * c];
    for p in 0..px {
        for i in 0..c {
            let u1i = v1[i * px + p] - mu1[i];
            let u2i = v2[i * px + p] - mu2[i];
            for j in i..c {
                let u1j = v1[j * px + p] - mu1[j];
                let u2j = v2[j * px + p] - mu2[j];
                c11[i * c + j] += u1i * u1j;
                c22[i * c + j] += u2i * u2j;
            }
            // The cross block is not symmetric; accumulate fully.
            for j in 0..c {
                let u2j = v2[j * px + p] - mu2[j];
                c12[i * c + j] += u1i * u2j;
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            c11[i * c + j] *= inv_n;
            c22[i * c + j] *= inv_n;
            c11[j * c + i] = c11[i * c + j];
            c22[j * c + i] = c22[i * c + j];
        }
        for j in 0..c {
            c12[i * c + j] *= inv_n;
        }
    }

    // Difference covariance, computed directly from the differences rather
    // than from the blocks: the direct route keeps the rounding floor at the
    // scale of the differences, so a near-identical pair yields a near-zero
    // Cd instead of block-cancellation noise.
    let mut mud = vec![0.0; c];
    for b in 0..c {
        let p1 = &v1[b * px..(b + 1) * px];
        let p2 = &v2[b * px..(b + 1) * px];
        mud[b] = p1.iter().zip(p2).map(|(a, b)| b - a).sum::<f64>() * inv_n;
    }
    let mut cd = vec![0.0; c * c];
    for p in 0..px {
        for i in 0..c {
            let di = v2[i * px + p] - v1[i * px + p] - mud[i];
            for j in i..c {
                let dj = v2[j * px + p] - v1[j * px + p] - mud[j];
                cd[i * c + j] += di * dj;
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            cd[i * c + j] *= inv_n;
            cd[j * c + i] = cd[i * c + j];
        }
    }
    // Joint covariance of [x1; x2] assembled from the blocks.
    let n2 = 2 * c;
    let mut cz = vec![0.0; n2 * n2];
    for i in 0..c {
        for j in 0..c {
            cz[i * n2 + j] = c11[i * c + j];
            cz[i * n2 + (c + j)] = c12[i * c + j];
            cz[(c + i) * n2 + j] = c12[j * c + i];
            cz[(c + i) * n2 + (c + j)] = c22[i * c + j];
        }
    }

    Ok(StatModel {
        bands: c,
        pixel_count: px,
        reg_eps,
        mu1,
        mu2,
        c11,
        c22,
        c12,
        cd,
        cz,
    })
}

/// Centered spectra of one pixel under both times, reused by the detectors.
pub(crate) fn centered_pair(
    x1: &HsiCube,
    x2: &HsiCube,
    stats: &StatModel,
    pixel: usize,
    u1: &mut [f64],
    u2: &mut [f64],
) {
    let px = x1.pixel_count();
    let v1 = x1.values();
    let v2 = x2.values();
    for b in 0..stats.bands {
        u1[b] = v1[b * px + pixel] - stats.mu1[b];
        u2[b] = v2[b * px + pixel] - stats.mu2[b];
    }
}

pub(crate) fn check_dims(stats: &StatModel, x1: &HsiCube, x2: &HsiCube) -> Result<()> {
    if !x1.same_dims(x2) || x1.bands() != stats.bands {
        return Err(Error::shape(
            format!("cube pair with {} bands", stats.bands),
            format!(
                "{}x{}x{} vs {}x{}x{}",
                x1.height(),
                x1.width(),
                x1.bands(),
                x2.height(),
                x2.width(),
                x2.bands()
            ),
        ));
    }
    Ok(())
}
