//! Fréchet distance between Gaussian fits of two feature clouds.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tolerated eigenvalue undershoot before a covariance counts as broken.
const EIG_TOL: f64 = 1e-8;

/// Sample mean and population covariance of row-major feature rows.
fn fit_gaussian(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::domain("cannot fit a gaussian to an empty set"));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::contract("feature rows must share a positive dimension"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::domain("feature rows contain non-finite values"));
    }
    let mut mean = DVector::zeros(d);
    for row in rows {
        for (i, &v) in row.iter().enumerate() {
            mean[i] += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for row in rows {
        let centered = DVector::from_row_slice(row) - &mean;
        cov += &centered * centered.transpose();
    }
    cov /= n as f64;
    Ok((mean, cov))
}

/// Principal square root of a symmetric positive semidefinite matrix.
/// Eigenvalues slightly below zero are clipped; below `-EIG_TOL` the
/// matrix is rejected as numerically broken.
fn sqrt_psd(mat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (mat + mat.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -EIG_TOL {
            return Err(Error::numeric(format!(
                "covariance has negative eigenvalue {v:.3e}"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// Squared Fréchet distance between the Gaussian fits of two sets:
/// `|m1 - m2|^2 + tr(C1 + C2 - 2 (C1 C2)^(1/2))`, clamped at zero.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mean_a, cov_a) = fit_gaussian(a)?;
    let (mean_b, cov_b) = fit_gaussian(b)?;
    if mean_a.len() != mean_b.len() {
        return Err(Error::contract("feature dimensions differ between the sets"));
    }
    let diff = &mean_a - &mean_b;
    let mean_term = diff.dot(&diff);
    // tr((C1 C2)^(1/2)) computed symmetrically as tr((A C2 A)^(1/2))
    // with A = C1^(1/2), which keeps the inner matrix symmetric PSD.
    let root_a = sqrt_psd(&cov_a)?;
    let inner = &root_a * &cov_b * &root_a;
    let cross = sqrt_psd(&inner)?.trace();
    let value = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}
